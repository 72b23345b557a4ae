use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LogRow, LossWeights, TrainConfig, TrainState};
use crate::autodiff::OptimizerState;
use crate::codec::{decode_reals, encode_reals, TensorRecord};
use crate::datagen::VideoId;
use crate::error::{AfnError, Result};
use crate::ism::MemoryBank;
use crate::model::ModelRecord;
use crate::tensor::Real;

pub const CHECKPOINT_FORMAT: &str = "afn-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdamRecord {
    step: u64,
    first: Vec<TensorRecord>,
    second: Vec<TensorRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MemoryVideoRecord {
    id: VideoId,
    counts: Vec<u32>,
    rows: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MemoryRecord {
    width: usize,
    videos: Vec<MemoryVideoRecord>,
}

/// Self-describing checkpoint file contents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointRecord {
    pub format: String,
    pub version: u32,
    pub precision: String,
    pub step: u64,
    pub seed: u64,
    pub train: TrainConfig,
    pub model: ModelRecord,
    adam: AdamRecord,
    memory: MemoryRecord,
    pub weights: LossWeights,
    pub log: Vec<LogRow>,
}

impl CheckpointRecord {
    pub fn new<F: Real>(state: &TrainState<F>) -> Self {
        let opt = &state.optimizer;
        let names: Vec<&str> = state.model.params.iter().map(|(n, _)| n).collect();
        let moments = |ms: &[crate::tensor::Tensor<F>]| names.iter().zip(ms).map(|(n, t)| TensorRecord::new(*n, t)).collect();
        CheckpointRecord {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            precision: F::NAME.into(),
            step: state.step,
            seed: state.seed,
            train: state.config.clone(),
            model: ModelRecord::new(&state.model),
            adam: AdamRecord {
                step: opt.step,
                first: moments(&opt.first),
                second: moments(&opt.second),
            },
            memory: MemoryRecord {
                width: state.memory.width(),
                videos: state
                    .memory
                    .export()
                    .into_iter()
                    .map(|(id, counts, rows)| MemoryVideoRecord {
                        id,
                        counts,
                        rows: encode_reals(&rows),
                    })
                    .collect(),
            },
            weights: state.weights,
            log: state.log.clone(),
        }
    }

    pub fn into_state<F: Real>(self) -> Result<TrainState<F>> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(AfnError::Invalid(format!("not a checkpoint: format `{}`", self.format)));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(AfnError::Version {
                found: self.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        if self.precision != F::NAME {
            return Err(AfnError::Invalid(format!(
                "checkpoint holds {} values, {} requested",
                self.precision,
                F::NAME
            )));
        }
        let model = self.model.into_model::<F>()?;
        let tensors = |rs: &[TensorRecord]| rs.iter().map(TensorRecord::to_tensor).collect::<Result<Vec<_>>>();
        let first = tensors(&self.adam.first)?;
        let second = tensors(&self.adam.second)?;
        for (moments, what) in [(&first, "first"), (&second, "second")] {
            let shapes_ok = moments.len() == model.params.len()
                && moments.iter().zip(model.params.values()).all(|(m, p)| m.shape() == p.shape());
            if !shapes_ok {
                return Err(AfnError::Invalid(format!("{what} moments do not match the parameters")));
            }
        }
        let optimizer = OptimizerState {
            config: self.train.adam.clone(),
            step: self.adam.step,
            first,
            second,
        };
        let entries = self
            .memory
            .videos
            .into_iter()
            .map(|v| Ok((v.id, v.counts, decode_reals(&v.rows)?)))
            .collect::<Result<Vec<_>>>()?;
        let memory = MemoryBank::import(self.memory.width, entries)?;
        if memory.width() != model.state_width() {
            return Err(AfnError::dim("checkpoint memory", &[memory.width()], &[model.state_width()]));
        }
        self.train.validate()?;
        Ok(TrainState {
            step: self.step,
            seed: self.seed,
            config: self.train,
            model,
            optimizer,
            memory,
            weights: self.weights,
            log: self.log,
        })
    }
}

pub fn save_checkpoint<F: Real>(state: &TrainState<F>, path: &Path) -> Result<()> {
    let text = serde_json::to_string(&CheckpointRecord::new(state)).map_err(|e| AfnError::Invalid(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| AfnError::io(path, e))
}

pub fn load_checkpoint<F: Real>(path: &Path) -> Result<TrainState<F>> {
    let text = std::fs::read_to_string(path).map_err(|e| AfnError::io(path, e))?;
    let record: CheckpointRecord = serde_json::from_str(&text).map_err(|e| AfnError::Parse {
        record: 0,
        reason: e.to_string(),
    })?;
    record.into_state()
}
