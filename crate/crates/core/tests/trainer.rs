mod common;

use afn_core::datagen::chain_spec;
use afn_core::model::{AfnModel, ModelConfig};
use afn_core::trainer::{append_log, LOG_HEADER, TrainState};

use common::*;

fn setup() -> (afn_core::datagen::Dataset, afn_core::datagen::DatasetSplit, ModelConfig) {
    let grammar = small_grammar(chain_spec(2, 3, 2), 4, 1);
    let (dataset, split) = data(&grammar, 4, 0.2, 2);
    let config = ModelConfig {
        dropout: 0.2,
        ..compact(&dataset)
    };
    (dataset, split, config)
}

#[test]
fn same_seed_same_trajectory() {
    let (dataset, split, config) = setup();
    let run = || {
        let mut s = TrainState::<f64>::new(AfnModel::new(config.clone(), 3).unwrap(), train_config(30, 6, 1e-3), &dataset, 4).unwrap();
        s.run(&dataset, &split.train, 30, |_| {}).unwrap();
        s
    };
    let (a, b) = (run(), run());
    assert_eq!(a.log, b.log);
    assert_eq!(a.model.params, b.model.params);
}

#[test]
fn first_row_starts_with_zero_weights_and_losses_stay_finite() {
    let (dataset, split, config) = setup();
    let mut s = TrainState::<f32>::new(AfnModel::new(config, 5).unwrap(), train_config(40, 6, 3e-3), &dataset, 6).unwrap();
    s.run(&dataset, &split.train, 40, |_| {}).unwrap();
    assert_eq!((s.log[0].alpha, s.log[0].beta), (0.0, 0.0));
    assert!(s.log.iter().all(|r| r.l_tot.is_finite() && r.grad_norm.is_finite()));
    // The weights of step k are the accuracies measured at step k - 1.
    for w in s.log.windows(2) {
        assert_eq!((w[1].alpha, w[1].beta), (w[0].acc_aux, w[0].acc_now));
    }
}

#[test]
fn training_writes_memory_and_counts() {
    let (dataset, split, config) = setup();
    let mut s = TrainState::<f32>::new(AfnModel::new(config, 7).unwrap(), train_config(10, 5, 1e-3), &dataset, 8).unwrap();
    s.run(&dataset, &split.train, 10, |_| {}).unwrap();
    let writes: u32 = split
        .train
        .iter()
        .flat_map(|&id| (0..dataset.video(id).unwrap().seconds()).map(move |t| (id, t)))
        .map(|(id, t)| s.memory.count(id, t).unwrap())
        .sum();
    assert_eq!(writes, 50);
    for &id in &split.test {
        assert_eq!(s.memory.count(id, 0).unwrap(), 0);
    }
}

#[test]
fn log_appends_continue_without_gaps() {
    let (dataset, split, config) = setup();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.csv");
    let mut s = TrainState::<f32>::new(AfnModel::new(config, 9).unwrap(), train_config(6, 4, 1e-3), &dataset, 10).unwrap();
    s.run(&dataset, &split.train, 3, |r| append_log(&path, std::slice::from_ref(r)).unwrap()).unwrap();
    s.run(&dataset, &split.train, 6, |r| append_log(&path, std::slice::from_ref(r)).unwrap()).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], LOG_HEADER.join(","));
    let steps: Vec<u64> = lines[1..].iter().map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(steps, vec![0, 1, 2, 3, 4, 5]);
}

#[test]
fn wrong_precision_checkpoint_is_rejected() {
    let (dataset, _, config) = setup();
    let s = TrainState::<f32>::new(AfnModel::new(config, 11).unwrap(), train_config(1, 2, 1e-3), &dataset, 12).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    afn_core::trainer::save_checkpoint(&s, &path).unwrap();
    assert!(afn_core::trainer::load_checkpoint::<f64>(&path).is_err());
    assert_eq!(afn_core::trainer::load_checkpoint::<f32>(&path).unwrap(), s);
}
