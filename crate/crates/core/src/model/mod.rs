//! The anticipation and forecasting network.
//!
//! Per clip: a 3-D conv stack turns `X` into the feature map `M`, two dense
//! layers reduce it to `L`, an LSTM step maps `(L, s_prev)` to `(h, c)`, and
//! a dense layer over `[L, s_prev, u]` produces the advisory matrix `W`
//! that modulates `h` into `w = W h`. Three softmax heads read `w` (current
//! action), `[w, y_now]` (next action or END) and `M` (auxiliary current
//! action). `u` is the activity embedding of `L`.

mod config;
mod network;

pub use config::{ConvGroupConfig, Init, ModelConfig, ParamShape, ShapePlan};
pub use network::{modulate, vec_inv, AfnModel, ClipVars, Dense, DenseIds, ForwardTrace, Mode, ModelVars, ParamIds};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamSet;
use crate::codec::TensorRecord;
use crate::error::{AfnError, Result};
use crate::tensor::Real;

pub const PARAMS_FORMAT: &str = "afn-params";
pub const PARAMS_VERSION: u32 = 1;

/// On-disk form of a model: configuration plus named tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelRecord {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub params: Vec<TensorRecord>,
}

impl ModelRecord {
    pub fn new<F: Real>(model: &AfnModel<F>) -> Self {
        ModelRecord {
            format: PARAMS_FORMAT.into(),
            version: PARAMS_VERSION,
            config: model.config.clone(),
            params: model.params.iter().map(|(n, t)| TensorRecord::new(n, t)).collect(),
        }
    }

    pub fn into_model<F: Real>(self) -> Result<AfnModel<F>> {
        if self.format != PARAMS_FORMAT {
            return Err(AfnError::Invalid(format!("not a parameter file: format `{}`", self.format)));
        }
        if self.version != PARAMS_VERSION {
            return Err(AfnError::Version {
                found: self.version,
                expected: PARAMS_VERSION,
            });
        }
        let mut params = ParamSet::new();
        for r in &self.params {
            params.add(r.name.clone(), r.to_tensor()?);
        }
        AfnModel::from_params(self.config, params)
    }
}

pub fn save_model<F: Real>(model: &AfnModel<F>, path: &Path) -> Result<()> {
    let text = serde_json::to_string(&ModelRecord::new(model)).map_err(|e| AfnError::Invalid(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| AfnError::io(path, e))
}

pub fn load_model<F: Real>(path: &Path) -> Result<AfnModel<F>> {
    let text = std::fs::read_to_string(path).map_err(|e| AfnError::io(path, e))?;
    let record: ModelRecord = serde_json::from_str(&text).map_err(|e| AfnError::Parse {
        record: 0,
        reason: e.to_string(),
    })?;
    record.into_model()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let m = AfnModel::<f32>::new(ModelConfig::compact(7, 4, 4, 3), 4).unwrap();
        save_model(&m, &path).unwrap();
        let back: AfnModel<f32> = load_model(&path).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let m = AfnModel::<f64>::new(ModelConfig::compact(7, 4, 4, 3), 4).unwrap();
        let mut r = ModelRecord::new(&m);
        r.version = 9;
        assert!(matches!(r.into_model::<f64>(), Err(AfnError::Version { found: 9, .. })));
    }
}
