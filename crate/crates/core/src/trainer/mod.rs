//! Losses, dynamic loss weights, the training loop and checkpoints.
//!
//! One step: sample a batch, run every clip against the memory as it was
//! before the step, average `L_tot` over the batch, add `γ` times the
//! episodic embedding loss, back-propagate, clip and apply Adam, then write
//! all new states into the memory and refresh α and β from the batch.

mod checkpoint;
mod loss;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointRecord, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use loss::{
    batch_accuracies, loss_terms, loss_terms_values, one_hot, total_loss, total_loss_graph, update_weights, ClipOutcome,
    LossWeights, Smoothing,
};

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, Graph, OptimizerState, Var};
use crate::datagen::{Dataset, VideoId};
use crate::error::{AfnError, Result};
use crate::ism::MemoryBank;
use crate::model::{AfnModel, ClipVars, ForwardTrace, Mode};
use crate::protonet::{self, split_episode, Episode};
use crate::sampler::{assemble_batch, Batch, SamplerConfig};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub sampler: SamplerConfig,
    pub adam: AdamConfig,
    /// Weight of the episodic embedding loss; 0 disables it.
    pub gamma: f64,
    pub smoothing: Smoothing,
    pub epoch_steps: u64,
    /// Zero the memory at every epoch boundary.
    pub reset_memory_per_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            sampler: SamplerConfig::default(),
            adam: AdamConfig::default(),
            gamma: 0.1,
            smoothing: Smoothing::Raw,
            epoch_steps: 10_000,
            reset_memory_per_epoch: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        if self.sampler.batch_size == 0 {
            return Err(AfnError::config("train.sampler.batch_size", "must be at least 1"));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(AfnError::config("train.gamma", "must be a non-negative number"));
        }
        if self.epoch_steps == 0 {
            return Err(AfnError::config("train.epoch_steps", "must be positive"));
        }
        if let Smoothing::Ema { factor } = self.smoothing {
            if !(0.0..1.0).contains(&factor) {
                return Err(AfnError::config("train.smoothing.factor", "must be in [0, 1)"));
            }
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub lr: f64,
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub l_tot: f64,
    pub proto: f64,
    pub alpha: f64,
    pub beta: f64,
    pub acc_aux: f64,
    pub acc_now: f64,
    pub acc_next: f64,
    pub grad_norm: f64,
}

pub const LOG_HEADER: [&str; 13] = [
    "step", "lr", "l1", "l2", "l3", "l_tot", "proto", "alpha", "beta", "acc_aux", "acc_now", "acc_next", "grad_norm",
];

/// Appends rows to a CSV log, writing the header when the file is new.
pub fn append_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let fresh = !path.exists() || std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| AfnError::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    let io = |e: csv::Error| AfnError::Invalid(format!("writing {}: {e}", path.display()));
    if fresh {
        w.write_record(LOG_HEADER).map_err(io)?;
    }
    for r in rows {
        w.serialize(r).map_err(io)?;
    }
    w.flush().map_err(|e| AfnError::io(path, e))
}

/// Everything needed to continue training bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<F> {
    pub step: u64,
    pub seed: u64,
    pub config: TrainConfig,
    pub model: AfnModel<F>,
    pub optimizer: OptimizerState<F>,
    pub memory: MemoryBank<F>,
    pub weights: LossWeights,
    pub log: Vec<LogRow>,
}

/// Random stream of one training step. Streams depend only on
/// `(seed, step)`, so no generator state has to be checkpointed.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

struct ClipWork<'a, F: Real> {
    graph: Graph<'a, F>,
    vars: ClipVars,
    params: crate::autodiff::BoundParams,
    l_tot: Var,
    terms: [f64; 3],
}

impl<F: Real> TrainState<F> {
    /// Fresh state; every video in `dataset` gets memory slots.
    pub fn new(model: AfnModel<F>, config: TrainConfig, dataset: &Dataset, seed: u64) -> Result<Self> {
        config.validate()?;
        let optimizer = OptimizerState::new(config.adam.clone(), &model.params);
        let mut memory = MemoryBank::new(model.state_width());
        for v in &dataset.videos {
            memory.register(v.id, v.seconds());
        }
        Ok(TrainState {
            step: 0,
            seed,
            weights: LossWeights::new(config.smoothing),
            config,
            model,
            optimizer,
            memory,
            log: Vec::new(),
        })
    }

    /// Samples the batch of the current step.
    pub fn next_batch(&self, dataset: &Dataset, ids: &[VideoId]) -> Result<(Batch<F>, Vec<u64>)> {
        let mut rng = step_rng(self.seed, self.step);
        let batch = assemble_batch(dataset, ids, &self.config.sampler, &mut rng)?;
        let clip_seeds = batch.clips.iter().map(|_| rng.random()).collect();
        Ok((batch, clip_seeds))
    }

    /// One optimisation step on a batch drawn from `ids`.
    pub fn train_step(&mut self, dataset: &Dataset, ids: &[VideoId]) -> Result<LogRow> {
        if self.config.reset_memory_per_epoch && self.step > 0 && self.step.is_multiple_of(self.config.epoch_steps) {
            self.memory.reset();
        }
        let (batch, clip_seeds) = self.next_batch(dataset, ids)?;
        let n = batch.clips.len();
        let weights = self.weights;
        let states: Vec<Vec<F>> = batch
            .clips
            .iter()
            .map(|c| self.model.read_state(c, &self.memory))
            .collect::<Result<_>>()?;

        let model = &self.model;
        let mut work: Vec<ClipWork<'_, F>> = batch
            .clips
            .par_iter()
            .zip(states.par_iter())
            .zip(clip_seeds.par_iter())
            .map(|((clip, s_prev), &seed)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let masks = model.dropout_masks(&mut rng)?;
                let mut graph = Graph::new();
                let (vars, params) = model.bind(&mut graph);
                let x = graph.constant(clip.x.clone());
                let s = graph.constant(Tensor::vector(s_prev.clone()));
                let annotate = |e: AfnError| match e {
                    AfnError::NonFinite { context } => AfnError::NonFinite {
                        context: format!("{context}; clip of video {} at t={}", clip.video, clip.t),
                    },
                    other => other,
                };
                let cv = vars.forward(&mut graph, x, s, masks.as_deref()).map_err(annotate)?;
                let terms = loss_terms(&mut graph, &cv, clip.y_current, clip.y_next)?;
                let l_tot = total_loss_graph(&mut graph, terms, &weights)?;
                let values = terms.map(|t| graph.scalar(t).f64());
                if !graph.scalar(l_tot).is_finite() {
                    let trace = ForwardTrace::from_graph(&graph, &cv);
                    return Err(AfnError::NonFinite {
                        context: format!("loss of video {} at t={}; extrema {:?}", clip.video, clip.t, trace.extrema()),
                    });
                }
                Ok(ClipWork {
                    graph,
                    vars: cv,
                    params,
                    l_tot,
                    terms: values,
                })
            })
            .collect::<Result<_>>()?;

        // Episodic loss on a separate graph whose leaves are the embeddings.
        let mut u_grads: Vec<Option<Tensor<F>>> = vec![None; n];
        let mut proto = 0.0;
        if self.config.gamma > 0.0 {
            let split = split_episode(&batch.clips.iter().map(|c| c.activity).collect::<Vec<_>>());
            let mut pg = Graph::new();
            let leaves: Vec<Var> = work.iter().map(|w| pg.input(w.graph.value(w.vars.u).clone())).collect();
            let support: Vec<(Var, usize)> = split.support.iter().map(|&i| (leaves[i], batch.clips[i].activity)).collect();
            let query: Vec<(Var, usize)> = split.query.iter().map(|&i| (leaves[i], batch.clips[i].activity)).collect();
            if let Some(loss) = protonet::proto_loss(&mut pg, &support, &query)? {
                proto = pg.scalar(loss).f64();
                let mut grads = pg.backward(loss)?;
                for (slot, &leaf) in u_grads.iter_mut().zip(&leaves) {
                    *slot = grads.take(leaf).map(|mut g| {
                        g.scale_in_place(F::of(self.config.gamma));
                        g
                    });
                }
            }
        }

        let inv_n = F::of(1.0 / n as f64);
        let per_clip: Vec<Vec<Tensor<F>>> = work
            .par_iter_mut()
            .zip(u_grads.into_par_iter())
            .map(|(w, ug)| {
                let mut seeds = vec![(w.l_tot, Tensor::scalar(inv_n))];
                if let Some(ug) = ug {
                    seeds.push((w.vars.u, ug));
                }
                let mut grads = w.graph.backward_with(&seeds)?;
                Ok(w.params.collect(&mut grads, &model.params))
            })
            .collect::<Result<_>>()?;
        let mut total = per_clip[0].clone();
        for clip_grads in &per_clip[1..] {
            for (acc, g) in total.iter_mut().zip(clip_grads) {
                acc.add_assign(g)?;
            }
        }

        let outcomes: Vec<ClipOutcome> = work
            .iter()
            .zip(&batch.clips)
            .map(|(w, c)| {
                let g = &w.graph;
                ClipOutcome::score(
                    g.value(w.vars.y_now).data(),
                    g.value(w.vars.y_next).data(),
                    g.value(w.vars.aux).data(),
                    c.y_current,
                    c.y_next,
                )
            })
            .collect();
        let new_states: Vec<Vec<F>> = work.iter().map(|w| w.graph.value(w.vars.s_new).data().to_vec()).collect();
        let mean = |k: usize| work.iter().map(|w| w.terms[k]).sum::<f64>() / n as f64;
        let (l1, l2, l3) = (mean(0), mean(1), mean(2));
        drop(work);

        let report = self.optimizer.step(&mut self.model.params, total)?;
        for (clip, s) in batch.clips.iter().zip(&new_states) {
            self.memory.write_state(clip.video, clip.t, s)?;
        }
        let (acc_aux, acc_now, acc_next) = batch_accuracies(&outcomes)?;
        let row = LogRow {
            step: self.step,
            lr: report.lr,
            l1,
            l2,
            l3,
            l_tot: total_loss(l1, l2, l3, &weights) + self.config.gamma * proto,
            proto,
            alpha: weights.alpha,
            beta: weights.beta,
            acc_aux,
            acc_now,
            acc_next,
            grad_norm: report.grad_norm,
        };
        self.weights = weights.updated(acc_aux, acc_now)?;
        self.step += 1;
        self.log.push(row.clone());
        Ok(row)
    }

    /// Runs until `self.step == until`, calling `on_step` after each step.
    pub fn run(&mut self, dataset: &Dataset, ids: &[VideoId], until: u64, mut on_step: impl FnMut(&LogRow)) -> Result<()> {
        while self.step < until {
            let row = self.train_step(dataset, ids)?;
            on_step(&row);
        }
        Ok(())
    }
}

/// Activity-episode accuracy of the embedder on one batch drawn from
/// `ids`: first half of each activity's clips are supports, the rest
/// queries.
pub fn episode_accuracy<F: Real>(model: &AfnModel<F>, dataset: &Dataset, ids: &[VideoId], sampler: &SamplerConfig, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch: Batch<F> = assemble_batch(dataset, ids, sampler, &mut rng)?;
    let embeddings: Vec<Vec<F>> = batch
        .clips
        .iter()
        .map(|c| {
            model
                .forward_with_state(&c.x, vec![F::zero(); model.state_width()], Mode::Inference, &mut rng)
                .map(|t| t.u.into_data())
        })
        .collect::<Result<_>>()?;
    let split = split_episode(&batch.clips.iter().map(|c| c.activity).collect::<Vec<_>>());
    let pick = |idx: &[usize]| idx.iter().map(|&i| (embeddings[i].clone(), batch.clips[i].activity)).collect();
    let episode = Episode {
        support: pick(&split.support),
        query: pick(&split.query),
    };
    protonet::episode_accuracy(&episode)
}

/// Prototypes of every activity from the embeddings of `per_video` clips
/// of each video in `ids`.
pub fn activity_prototypes<F: Real>(model: &AfnModel<F>, dataset: &Dataset, ids: &[VideoId], per_video: usize, seed: u64) -> Result<Vec<protonet::Prototype<F>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut support = Vec::new();
    for &id in ids {
        let video = dataset.video(id)?;
        for _ in 0..per_video {
            let clip = crate::sampler::sample_clip::<F, _>(video, &dataset.meta, crate::sampler::SampleMode::Train, false, &mut rng)?;
            let t = model.forward_with_state(&clip.x, vec![F::zero(); model.state_width()], Mode::Inference, &mut rng)?;
            support.push((t.u.into_data(), video.activity));
        }
    }
    protonet::compute_prototypes(&Episode { support, query: vec![] })
}
