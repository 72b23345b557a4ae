#![allow(dead_code)]

use afn_core::datagen::{generate_dataset, split_dataset, ActivityGrammar, Dataset, DatasetSplit, GrammarSpec, VideoId};
use afn_core::evaluator::{anticipation_accuracy, evaluate, forecasting_accuracy, ModelPredictor, PredictionRecord};
use afn_core::model::{AfnModel, ModelConfig};
use afn_core::trainer::{TrainConfig, TrainState};
use afn_core::Real;

/// Grammar from `spec` rendered on `side x side` frames.
pub fn small_grammar(mut spec: GrammarSpec, side: usize, seed: u64) -> ActivityGrammar {
    spec.height = side;
    spec.width = side;
    ActivityGrammar::from_spec(spec, seed).unwrap()
}

pub fn data(grammar: &ActivityGrammar, per_activity: usize, sigma: f64, seed: u64) -> (Dataset, DatasetSplit) {
    let dataset = generate_dataset(grammar, per_activity, 6, sigma, seed).unwrap();
    let ids: Vec<VideoId> = dataset.videos.iter().map(|v| v.id).collect();
    let split = split_dataset(&ids, [0.6, 0.3, 0.1], seed ^ 0x5eed).unwrap();
    (dataset, split)
}

pub fn compact(dataset: &Dataset) -> ModelConfig {
    let m = &dataset.meta;
    ModelConfig::compact(m.channels(), m.height, m.width, m.num_actions())
}

pub fn train_config(steps: u64, batch: usize, lr: f64) -> TrainConfig {
    let mut c = TrainConfig::default();
    c.steps = steps;
    c.sampler.batch_size = batch;
    c.adam.base_lr = lr;
    c.adam.decay_interval = steps.max(1);
    c
}

/// As [`train_config`], with the rate multiplied by `decay` in each of
/// `phases` equal phases so late steps barely move the weights.
pub fn annealed(steps: u64, batch: usize, lr: f64, decay: f64, phases: u64) -> TrainConfig {
    let mut c = train_config(steps, batch, lr);
    c.adam.decay = decay;
    c.adam.decay_interval = (steps / phases).max(1);
    c
}

pub fn trained<F: Real>(model: ModelConfig, train: TrainConfig, dataset: &Dataset, ids: &[VideoId], seed: u64) -> TrainState<F> {
    let steps = train.steps;
    let model = AfnModel::<F>::new(model, seed).unwrap();
    let mut state = TrainState::new(model, train, dataset, seed.wrapping_add(1)).unwrap();
    state.run(dataset, ids, steps, |_| {}).unwrap();
    state
}

pub fn records<F: Real>(model: &AfnModel<F>, dataset: &Dataset, ids: &[VideoId]) -> Vec<PredictionRecord> {
    evaluate(&ModelPredictor { model, prototypes: None }, dataset, ids).unwrap()
}

/// `(current, next)` accuracy on `ids`.
pub fn accuracies<F: Real>(model: &AfnModel<F>, dataset: &Dataset, ids: &[VideoId]) -> (f64, f64) {
    let r = records(model, dataset, ids);
    (anticipation_accuracy(&r).unwrap(), forecasting_accuracy(&r).unwrap())
}
