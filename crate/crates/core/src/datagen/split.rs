use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::video::VideoId;
use crate::error::{AfnError, Result};

/// Train / test / validation fractions.
pub const DEFAULT_FRACTIONS: [f64; 3] = [0.6, 0.3, 0.1];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<VideoId>,
    pub test: Vec<VideoId>,
    pub validation: Vec<VideoId>,
}

impl DatasetSplit {
    pub fn all(&self) -> impl Iterator<Item = VideoId> + '_ {
        self.train.iter().chain(&self.test).chain(&self.validation).copied()
    }
}

/// Random partition; sizes are `round(f * n)` for train and test with the
/// remainder going to validation.
pub fn split_dataset(ids: &[VideoId], fractions: [f64; 3], seed: u64) -> Result<DatasetSplit> {
    if fractions.iter().any(|&f| !(0.0..=1.0).contains(&f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(AfnError::config("split.fractions", "must be in [0, 1] and sum to 1"));
    }
    let parts = fractions.iter().filter(|&&f| f > 0.0).count();
    if ids.len() < parts {
        return Err(AfnError::Invalid(format!(
            "{} videos cannot fill {parts} non-empty split parts",
            ids.len()
        )));
    }
    let n = ids.len() as f64;
    let mut sizes = [(fractions[0] * n).round() as usize, (fractions[1] * n).round() as usize, 0];
    for (k, size) in sizes.iter_mut().enumerate().take(2) {
        if fractions[k] > 0.0 && *size == 0 {
            *size = 1;
        }
    }
    sizes[1] = sizes[1].min(ids.len() - sizes[0].min(ids.len()));
    sizes[0] = sizes[0].min(ids.len());
    sizes[2] = ids.len() - sizes[0] - sizes[1];
    if fractions[2] > 0.0 && sizes[2] == 0 {
        let donor = if sizes[0] >= sizes[1] { 0 } else { 1 };
        sizes[donor] -= 1;
        sizes[2] = 1;
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test_start = sizes[0];
    let val_start = sizes[0] + sizes[1];
    Ok(DatasetSplit {
        train: shuffled[..test_start].to_vec(),
        test: shuffled[test_start..val_start].to_vec(),
        validation: shuffled[val_start..].to_vec(),
    })
}
