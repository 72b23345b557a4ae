//! Central finite-difference verification of every differentiable operation
//! and of the full network loss, in 64-bit.
//!
//! Each check builds a scalar `sum(r * f(inputs))` with a fixed random `r`,
//! differentiates it once in reverse mode, and compares a subset of
//! coordinates against `(f(x + h) - f(x - h)) / 2h`. The relative error of
//! a coordinate is `|a - n| / max(|a|, |n|, floor)`.

use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{lstm_cell, CustomOp, Graph, LstmVars, Var};
use crate::error::{AfnError, Result};
use crate::model::{modulate, vec_inv, AfnModel, Init, ModelConfig};
use crate::protonet::proto_loss;
use crate::tensor::Tensor;
use crate::trainer::{loss_terms, total_loss_graph, LossWeights, Smoothing};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckConfig {
    pub step: f64,
    pub floor: f64,
    /// Coordinates checked per input tensor (all of them when smaller).
    pub coords: usize,
    pub op_tolerance: f64,
    pub model_tolerance: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            floor: 1e-4,
            coords: 6,
            op_tolerance: 1e-4,
            model_tolerance: 1e-3,
            seed: 7,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CheckKind {
    Op,
    Model,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub kind: CheckKind,
    pub coordinates: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub results: Vec<CheckResult>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(CheckResult::passed)
    }

    pub fn failures(&self) -> Vec<&CheckResult> {
        self.results.iter().filter(|r| !r.passed()).collect()
    }

    pub fn max_error(&self, kind: CheckKind) -> f64 {
        self.results.iter().filter(|r| r.kind == kind).map(|r| r.max_rel_err).fold(0.0, f64::max)
    }

    /// Fixed-width table, one line per check.
    pub fn render(&self) -> String {
        let mut s = format!("{:<28} {:>6} {:>12} {:>10}  status\n", "check", "coords", "max_rel_err", "tol");
        for r in &self.results {
            let _ = writeln!(
                s,
                "{:<28} {:>6} {:>12.3e} {:>10.0e}  {}",
                r.name,
                r.coordinates,
                r.max_rel_err,
                r.tolerance,
                if r.passed() { "ok" } else { "FAIL" }
            );
        }
        s
    }
}

/// Builds the checked function from graph inputs; must return any tensor.
type Build<'b> = dyn Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var> + 'b;

fn projected(g: &mut Graph<'_, f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    if g.value(out).len() == 1 {
        return Ok(out);
    }
    let r = g.constant(weights.reshape(g.shape(out))?);
    let p = g.mul(out, r)?;
    g.sum(p)
}

fn evaluate(inputs: &[Tensor<f64>], build: &Build<'_>, weights: &Tensor<f64>) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let root = projected(&mut g, out, weights)?;
    Ok(g.scalar(root))
}

fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Indices to check: the largest analytic entry plus a random subset.
fn pick(grad: &Tensor<f64>, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = grad.len();
    if n <= k {
        return (0..n).collect();
    }
    let top = grad.map(f64::abs).argmax();
    let mut idx: Vec<usize> = sample(rng, n, k.saturating_sub(1)).into_iter().filter(|&i| i != top).collect();
    idx.push(top);
    idx.sort_unstable();
    idx
}

/// Checks `build` at `inputs` against central differences.
pub fn check_function(name: &str, kind: CheckKind, inputs: Vec<Tensor<f64>>, build: &Build<'_>, cfg: &GradCheckConfig, rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let weights = random_tensor(&[g.value(out).len()], -1.0, 1.0, rng);
    let root = projected(&mut g, out, &weights)?;
    let grads = g.backward(root)?;

    let mut worst = 0.0f64;
    let mut coordinates = 0;
    for (k, &v) in vars.iter().enumerate() {
        let analytic = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for i in pick(&analytic, cfg.coords, rng) {
            let mut shifted = inputs.clone();
            shifted[k].data_mut()[i] += cfg.step;
            let up = evaluate(&shifted, build, &weights)?;
            shifted[k].data_mut()[i] -= 2.0 * cfg.step;
            let down = evaluate(&shifted, build, &weights)?;
            let numeric = (up - down) / (2.0 * cfg.step);
            worst = worst.max(rel_err(analytic.data()[i], numeric, cfg.floor));
            coordinates += 1;
        }
    }
    let tolerance = match kind {
        CheckKind::Op => cfg.op_tolerance,
        CheckKind::Model => cfg.model_tolerance,
    };
    Ok(CheckResult {
        name: name.into(),
        kind,
        coordinates,
        max_rel_err: worst,
        tolerance,
    })
}

fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches data")
}

/// Values bounded away from zero so kinks stay out of the difference stencil.
fn away_from_zero(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..1.0);
            if rng.random::<bool>() { m } else { -m }
        })
        .collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// `x²` forward with a deliberately wrong `3x` backward.
pub struct FaultySquare;

impl CustomOp<f64> for FaultySquare {
    fn name(&self) -> &str {
        "faulty_square"
    }

    fn forward(&self, inputs: &[&Tensor<f64>]) -> Result<Tensor<f64>> {
        Ok(inputs[0].map(|x| x * x))
    }

    fn backward(&self, inputs: &[&Tensor<f64>], _output: &Tensor<f64>, grad: &Tensor<f64>) -> Vec<Tensor<f64>> {
        let data = inputs[0].data().iter().zip(grad.data()).map(|(x, g)| 3.0 * x * g).collect();
        vec![Tensor::new(inputs[0].shape(), data).expect("same shape")]
    }
}

fn op_checks(cfg: &GradCheckConfig, rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let mut run = |name: &str, inputs: Vec<Tensor<f64>>, build: &Build<'_>, rng: &mut ChaCha8Rng| -> Result<()> {
        out.push(check_function(name, CheckKind::Op, inputs, build, cfg, rng)?);
        Ok(())
    };
    let r = |shape: &[usize], rng: &mut ChaCha8Rng| random_tensor(shape, -1.0, 1.0, rng);

    let i = vec![r(&[3, 4], rng), r(&[4, 2], rng)];
    run("matmul", i, &|g, v| g.matmul(v[0], v[1]), rng)?;
    let i = vec![r(&[5], rng), r(&[5], rng)];
    run("add", i, &|g, v| g.add(v[0], v[1]), rng)?;
    let i = vec![r(&[5], rng), r(&[5], rng)];
    run("sub", i, &|g, v| g.sub(v[0], v[1]), rng)?;
    let i = vec![r(&[2, 3], rng), r(&[2, 3], rng)];
    run("mul", i, &|g, v| g.mul(v[0], v[1]), rng)?;
    let i = vec![r(&[5], rng)];
    run("scale", i, &|g, v| g.scale(v[0], 1.7), rng)?;
    let i = vec![r(&[6], rng)];
    run("sum", i, &|g, v| g.sum(v[0]), rng)?;
    let i = vec![away_from_zero(&[10], rng)];
    run("relu", i, &|g, v| g.relu(v[0]), rng)?;
    let i = vec![r(&[6], rng)];
    run("sigmoid", i, &|g, v| g.sigmoid(v[0]), rng)?;
    let i = vec![r(&[6], rng)];
    run("tanh", i, &|g, v| g.tanh(v[0]), rng)?;
    let i = vec![r(&[5], rng)];
    run("softmax", i, &|g, v| g.softmax(v[0]), rng)?;
    let target = Tensor::from_f64(&[4], &[0.0, 1.0, 0.0, 0.0])?;
    let i = vec![random_tensor(&[4], 0.1, 1.0, rng)];
    run("cross_entropy", i, &|g, v| g.cross_entropy(&target, v[0]), rng)?;
    let i = vec![r(&[5], rng)];
    run("softmax+cross_entropy", i, &|g, v| {
        let p = g.softmax(v[0])?;
        g.cross_entropy(&Tensor::from_f64(&[5], &[0.0, 0.0, 1.0, 0.0, 0.0])?, p)
    }, rng)?;
    let i = vec![r(&[3], rng), r(&[4], rng)];
    run("concat", i, &|g, v| g.concat(&[v[0], v[1]]), rng)?;
    let i = vec![r(&[7], rng)];
    run("slice", i, &|g, v| g.slice(v[0], 2, 3), rng)?;
    let i = vec![r(&[2, 3], rng)];
    run("reshape", i, &|g, v| g.reshape(v[0], &[3, 2]), rng)?;
    let i = vec![r(&[2, 3, 4], rng)];
    run("permute", i, &|g, v| g.permute(v[0], &[2, 0, 1]), rng)?;
    let i = vec![r(&[2, 3, 4, 4], rng), r(&[3, 2, 3, 3, 3], rng), r(&[3], rng)];
    run("conv3d", i, &|g, v| g.conv3d(v[0], v[1], v[2], [1, 1, 1]), rng)?;
    let i = vec![r(&[2, 2, 4, 4], rng)];
    run("max_pool3d", i, &|g, v| g.max_pool3d(v[0], [2, 2, 2]), rng)?;
    let mask = Tensor::from_f64(&[6], &[2.0, 0.0, 2.0, 2.0, 0.0, 2.0])?;
    let i = vec![r(&[6], rng)];
    run("dropout", i, &|g, v| g.dropout(v[0], &mask), rng)?;
    let i = vec![r(&[4], rng), r(&[3, 4], rng), r(&[3], rng)];
    run("linear", i, &|g, v| g.linear(v[0], v[1], v[2]), rng)?;
    let i = vec![r(&[3], rng), r(&[2], rng), r(&[2], rng), r(&[8, 3], rng), r(&[8, 2], rng), r(&[8], rng)];
    run("lstm_cell", i, &|g, v| {
        let w = LstmVars {
            w_ih: v[3],
            w_hh: v[4],
            bias: v[5],
        };
        let (h, c) = lstm_cell(g, v[0], v[1], v[2], w)?;
        g.concat(&[h, c])
    }, rng)?;
    let i = vec![r(&[9], rng), r(&[3], rng)];
    run("vec_inv+modulate", i, &|g, v| {
        let w = vec_inv(g, v[0], 3)?;
        modulate(g, w, v[1])
    }, rng)?;
    let i = vec![r(&[3], rng), r(&[3], rng), r(&[3], rng), r(&[3], rng), r(&[3], rng)];
    run("proto_loss", i, &|g, v| {
        let loss = proto_loss(g, &[(v[0], 0), (v[1], 1), (v[2], 0)], &[(v[3], 0), (v[4], 1)])?;
        loss.ok_or_else(|| AfnError::Invalid("no query".into()))
    }, rng)?;
    Ok(out)
}

/// Network with every parameter drawn at random, including the ones that
/// start at zero or identity, so that every path carries gradient.
fn perturbed_model(config: ModelConfig, rng: &mut ChaCha8Rng) -> Result<AfnModel<f64>> {
    let plan = config.shape_plan()?;
    let mut model = AfnModel::<f64>::new(config, rng.random())?;
    for (shape, value) in plan.params.iter().zip(model.params.values_mut()) {
        if matches!(shape.init, Init::Zeros | Init::Identity | Init::LstmBias) {
            let noise = random_tensor(value.shape(), -0.1, 0.1, rng);
            value.add_assign(&noise)?;
        }
    }
    Ok(model)
}

/// End-to-end checks of the total loss with respect to every parameter
/// tensor, the input clip and the previous state.
fn model_checks(config: ModelConfig, cfg: &GradCheckConfig, rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let model = perturbed_model(config, rng)?;
    let plan = model.shape_plan();
    let masks = model.dropout_masks(rng)?;
    let x = random_tensor(&plan.x, 0.0, 1.0, rng);
    let s_prev = random_tensor(&[model.state_width()], -0.5, 0.5, rng);
    let actions = model.config.actions;
    let (y_cur, y_next) = (rng.random_range(0..actions), rng.random_range(0..=actions));
    let weights = LossWeights {
        alpha: 0.5,
        beta: 0.5,
        smoothing: Smoothing::Raw,
    };
    let names: Vec<String> = model.params.iter().map(|(n, _)| n.to_string()).collect();
    let n_params = names.len();

    // Inputs: every parameter, then X, then s_prev.
    let mut inputs: Vec<Tensor<f64>> = model.params.values().to_vec();
    inputs.push(x);
    inputs.push(s_prev);
    let loss = |g: &mut Graph<'_, f64>, v: &[Var]| -> Result<Var> {
        let bound = crate::autodiff::BoundParams::from_vars(v[..n_params].to_vec());
        let vars = crate::model::ModelVars::new(&model.config, &model.ids, &bound);
        let clip = vars.forward(g, v[n_params], v[n_params + 1], masks.as_deref())?;
        let terms = loss_terms(g, &clip, y_cur, y_next)?;
        total_loss_graph(g, terms, &weights)
    };

    // One check per tensor: all other inputs stay fixed.
    let mut out = Vec::new();
    let labels: Vec<String> = names.into_iter().chain(["input.x".to_string(), "input.s_prev".to_string()]).collect();
    for (k, label) in labels.iter().enumerate() {
        let build = |g: &mut Graph<'_, f64>, v: &[Var]| -> Result<Var> {
            let mut all: Vec<Var> = Vec::with_capacity(inputs.len());
            for (j, t) in inputs.iter().enumerate() {
                all.push(if j == k { v[0] } else { g.constant(t.clone()) });
            }
            loss(g, &all)
        };
        out.push(check_function(&format!("loss/{label}"), CheckKind::Model, vec![inputs[k].clone()], &build, cfg, rng)?);
    }
    Ok(out)
}

/// Every operation check plus the end-to-end checks on `model`.
pub fn run_suite(model: ModelConfig, cfg: &GradCheckConfig, inject_faulty: bool) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut results = op_checks(cfg, &mut rng)?;
    if inject_faulty {
        let i = vec![random_tensor(&[4], 0.2, 1.0, &mut rng)];
        results.push(check_function("faulty_square", CheckKind::Op, i, &|g, v| g.custom(&[v[0]], Box::new(FaultySquare)), cfg, &mut rng)?);
    }
    results.extend(model_checks(model, cfg, &mut rng)?);
    Ok(GradReport { results })
}
