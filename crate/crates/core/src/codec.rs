//! Bit-exact text encoding of numeric arrays for checkpoint files.
//!
//! Values are widened to `f64` and stored as little-endian bytes in base64,
//! so both precisions round-trip exactly.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{AfnError, Result};
use crate::tensor::{Real, Tensor};

pub fn encode_reals<F: Real>(xs: &[F]) -> String {
    let mut bytes = Vec::with_capacity(xs.len() * 8);
    for x in xs {
        bytes.extend_from_slice(&x.f64().to_le_bytes());
    }
    STANDARD.encode(bytes)
}

pub fn decode_reals<F: Real>(text: &str) -> Result<Vec<F>> {
    let bytes = STANDARD
        .decode(text)
        .map_err(|e| AfnError::Invalid(format!("bad base64 payload: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(AfnError::Invalid(format!("{} bytes is not a whole number of values", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| F::of(f64::from_le_bytes(c.try_into().expect("chunk of 8"))))
        .collect())
}

/// A named tensor as stored on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: String,
}

impl TensorRecord {
    pub fn new<F: Real>(name: impl Into<String>, tensor: &Tensor<F>) -> Self {
        TensorRecord {
            name: name.into(),
            shape: tensor.shape().to_vec(),
            data: encode_reals(tensor.data()),
        }
    }

    pub fn to_tensor<F: Real>(&self) -> Result<Tensor<F>> {
        Tensor::new(&self.shape, decode_reals(&self.data)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let xs = [0.1f64, -0.0, 1e-300, f64::MAX, std::f64::consts::PI];
        assert_eq!(decode_reals::<f64>(&encode_reals(&xs)).unwrap(), xs);
        let ys = [0.1f32, -3.5e-20, f32::MIN_POSITIVE];
        assert_eq!(decode_reals::<f32>(&encode_reals(&ys)).unwrap(), ys);
        assert!(decode_reals::<f64>("AAAA").is_err());
    }

    #[test]
    fn tensor_record_round_trip() {
        let t = Tensor::<f64>::from_f64(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.25]).unwrap();
        let r = TensorRecord::new("w", &t);
        assert_eq!(r.to_tensor::<f64>().unwrap(), t);
    }
}
