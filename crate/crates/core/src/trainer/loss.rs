use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var, PROB_FLOOR};
use crate::error::{AfnError, Result};
use crate::model::ClipVars;
use crate::tensor::{argmax, Real, Tensor};

/// How α and β follow the batch accuracies.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum Smoothing {
    /// Previous batch's accuracy, as is.
    Raw,
    /// `x ← factor·x + (1 − factor)·accuracy`.
    Ema { factor: f64 },
}

/// Dynamic loss weights: α tracks the auxiliary head's accuracy, β the
/// current-action head's.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub smoothing: Smoothing,
}

impl LossWeights {
    pub fn new(smoothing: Smoothing) -> Self {
        LossWeights {
            alpha: 0.0,
            beta: 0.0,
            smoothing,
        }
    }

    /// Weights after a batch with the given accuracies.
    pub fn updated(&self, aux_accuracy: f64, now_accuracy: f64) -> Result<Self> {
        for (name, v) in [("aux", aux_accuracy), ("y_now", now_accuracy)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(AfnError::Invalid(format!("{name} accuracy {v} outside [0, 1]")));
            }
        }
        let (alpha, beta) = match self.smoothing {
            Smoothing::Raw => (aux_accuracy, now_accuracy),
            Smoothing::Ema { factor } => (
                factor * self.alpha + (1.0 - factor) * aux_accuracy,
                factor * self.beta + (1.0 - factor) * now_accuracy,
            ),
        };
        Ok(LossWeights {
            alpha,
            beta,
            smoothing: self.smoothing,
        })
    }
}

/// Per-clip correctness of the three heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClipOutcome {
    pub aux_correct: bool,
    pub now_correct: bool,
    pub next_correct: bool,
}

impl ClipOutcome {
    pub fn score<F: Real>(y_now: &[F], y_next: &[F], aux: &[F], y_current: usize, y_following: usize) -> Self {
        ClipOutcome {
            aux_correct: argmax(aux) == y_current,
            now_correct: argmax(y_now) == y_current,
            next_correct: argmax(y_next) == y_following,
        }
    }
}

/// `(aux, y_now, y_next)` accuracies of a batch.
pub fn batch_accuracies(outcomes: &[ClipOutcome]) -> Result<(f64, f64, f64)> {
    if outcomes.is_empty() {
        return Err(AfnError::Invalid("accuracy of an empty batch".into()));
    }
    let n = outcomes.len() as f64;
    let frac = |f: fn(&ClipOutcome) -> bool| outcomes.iter().filter(|o| f(o)).count() as f64 / n;
    Ok((frac(|o| o.aux_correct), frac(|o| o.now_correct), frac(|o| o.next_correct)))
}

/// New α, β from a batch's outcomes.
pub fn update_weights(outcomes: &[ClipOutcome], weights: &LossWeights) -> Result<LossWeights> {
    let (aux, now, _) = batch_accuracies(outcomes)?;
    weights.updated(aux, now)
}

/// `α(1−β)·L1 + αβ·L2 + (1−α)·L3`.
pub fn total_loss(l1: f64, l2: f64, l3: f64, w: &LossWeights) -> f64 {
    let (a, b) = (w.alpha, w.beta);
    a * ((1.0 - b) * l1 + b * l2) + (1.0 - a) * l3
}

pub fn one_hot<F: Real>(label: usize, classes: usize) -> Result<Tensor<F>> {
    if label >= classes {
        return Err(AfnError::Lookup(format!("label {label} outside {classes} classes")));
    }
    let mut t = Tensor::zeros(&[classes]);
    t.data_mut()[label] = F::one();
    Ok(t)
}

/// Cross-entropies `(L1, L2, L3)` of `y_now`, `y_next` and `aux` on the graph.
pub fn loss_terms<F: Real>(g: &mut Graph<'_, F>, clip: &ClipVars, y_current: usize, y_next: usize) -> Result<[Var; 3]> {
    let k = g.value(clip.y_now).len();
    let now_target = one_hot(y_current, k)?;
    let next_target = one_hot(y_next, g.value(clip.y_next).len())?;
    Ok([
        g.cross_entropy(&now_target, clip.y_now)?,
        g.cross_entropy(&next_target, clip.y_next)?,
        g.cross_entropy(&now_target, clip.aux)?,
    ])
}

/// Same three cross-entropies computed directly from distributions.
pub fn loss_terms_values<F: Real>(y_now: &[F], y_next: &[F], aux: &[F], y_current: usize, y_following: usize) -> Result<[f64; 3]> {
    if y_current >= y_now.len() || y_current >= aux.len() || y_following >= y_next.len() {
        return Err(AfnError::Lookup("target label outside the head's classes".into()));
    }
    let ce = |p: F| -p.f64().max(PROB_FLOOR).ln();
    Ok([ce(y_now[y_current]), ce(y_next[y_following]), ce(aux[y_current])])
}

/// Graph form of [`total_loss`]; α and β enter as constants.
pub fn total_loss_graph<F: Real>(g: &mut Graph<'_, F>, terms: [Var; 3], w: &LossWeights) -> Result<Var> {
    let (a, b) = (w.alpha, w.beta);
    let t1 = g.scale(terms[0], F::of(a * (1.0 - b)))?;
    let t2 = g.scale(terms[1], F::of(a * b))?;
    let t3 = g.scale(terms[2], F::of(1.0 - a))?;
    let s = g.add(t1, t2)?;
    g.add(s, t3)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(alpha: f64, beta: f64) -> LossWeights {
        LossWeights {
            alpha,
            beta,
            smoothing: Smoothing::Raw,
        }
    }

    #[test]
    fn regime_identities() {
        let (l1, l2, l3) = (0.7, 1.9, 2.3);
        assert_eq!(total_loss(l1, l2, l3, &w(0.0, 0.0)), l3);
        assert_eq!(total_loss(l1, l2, l3, &w(1.0, 1.0)), l2);
        assert!((total_loss(l1, l2, l3, &w(0.5, 0.0)) - 0.5 * (l1 + l3)).abs() < 1e-12);
        assert!((total_loss(l1, l2, l3, &w(1.0, 0.5)) - 0.5 * (l1 + l2)).abs() < 1e-12);
        assert!((total_loss(1.0, 2.0, 3.0, &w(0.8, 0.5)) - 1.8).abs() < 1e-12);
    }

    #[test]
    fn weight_updates() {
        let all = [ClipOutcome {
            aux_correct: true,
            now_correct: false,
            next_correct: false,
        }; 4];
        let u = update_weights(&all, &w(0.0, 0.0)).unwrap();
        assert_eq!((u.alpha, u.beta), (1.0, 0.0));
        let half = [
            ClipOutcome {
                aux_correct: false,
                now_correct: true,
                next_correct: false,
            },
            ClipOutcome {
                aux_correct: false,
                now_correct: false,
                next_correct: false,
            },
        ];
        assert_eq!(update_weights(&half, &w(0.0, 0.0)).unwrap().beta, 0.5);
        assert!(update_weights(&[], &w(0.0, 0.0)).is_err());

        let ema = LossWeights::new(Smoothing::Ema { factor: 0.9 });
        let ema = ema.updated(0.0, 0.0).unwrap().updated(1.0, 1.0).unwrap();
        assert!((ema.alpha - 0.1).abs() < 1e-15 && (ema.beta - 0.1).abs() < 1e-15);
    }

    #[test]
    fn term_limits() {
        let perfect = loss_terms_values(&[0.0, 1.0], &[0.0, 0.0, 1.0], &[0.0, 1.0], 1, 2).unwrap();
        assert!(perfect.iter().all(|&l| l <= 1e-7));
        let k = 4;
        let u = vec![1.0 / k as f64; k];
        let u1 = vec![1.0 / (k + 1) as f64; k + 1];
        let t = loss_terms_values(&u, &u1, &u, 0, 4).unwrap();
        assert!((t[0] - (k as f64).ln()).abs() < 1e-12);
        assert!((t[1] - ((k + 1) as f64).ln()).abs() < 1e-12);
        assert!(loss_terms_values(&u, &u1, &u, 4, 0).is_err());
    }

    #[test]
    fn weights_are_constants_in_the_graph() {
        let mut g = Graph::<f64>::new();
        let terms = [
            g.input(Tensor::scalar(1.0)),
            g.input(Tensor::scalar(2.0)),
            g.input(Tensor::scalar(3.0)),
        ];
        let ww = w(0.8, 0.5);
        let tot = total_loss_graph(&mut g, terms, &ww).unwrap();
        assert!((g.scalar(tot) - 1.8).abs() < 1e-12);
        let grads = g.backward(tot).unwrap();
        let d: Vec<f64> = terms.iter().map(|&t| grads.get(t).unwrap().data()[0]).collect();
        assert!((d[0] - 0.4).abs() < 1e-15 && (d[1] - 0.4).abs() < 1e-15 && (d[2] - 0.2).abs() < 1e-15);
    }
}
