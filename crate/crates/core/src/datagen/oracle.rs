//! Bayes-optimal next-action predictor of a grammar and its accuracy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::grammar::{ActionLabel, Activity, ActivityGrammar};
use crate::error::{AfnError, Result};
use crate::tensor::argmax;

/// Distribution of the next label (actions plus END, indexed by global
/// label) given the activity and the current action.
pub fn oracle_next_distribution(grammar: &ActivityGrammar, activity: usize, current: ActionLabel) -> Result<Vec<f64>> {
    let act = grammar.activity(activity)?;
    let local = act.local_index(current).ok_or_else(|| {
        AfnError::Lookup(format!("action {current} does not occur in activity `{}`", act.name))
    })?;
    let mut dist = vec![0.0; grammar.num_actions() + 1];
    for (j, &p) in act.transitions[local].iter().enumerate() {
        let label = if j == act.end_state() { grammar.end_label() } else { act.actions[j] };
        dist[label] += p;
    }
    Ok(dist)
}

/// Label the oracle predicts: argmax of [`oracle_next_distribution`].
pub fn oracle_prediction(grammar: &ActivityGrammar, activity: usize, current: ActionLabel) -> Result<ActionLabel> {
    Ok(argmax(&oracle_next_distribution(grammar, activity, current)?))
}

fn row_max(act: &Activity, local: usize) -> f64 {
    act.transitions[local].iter().copied().fold(0.0, f64::max)
}

/// Expected visits to each transient action before absorption:
/// solves `(I - Q)^T n = start`.
pub fn expected_visits(act: &Activity) -> Result<Vec<f64>> {
    let m = act.len();
    let mut a = vec![vec![0.0; m + 1]; m];
    for (i, row) in a.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate().take(m) {
            let id = if i == j { 1.0 } else { 0.0 };
            *cell = id - act.transitions[j][i];
        }
        row[m] = act.start[i];
    }
    for col in 0..m {
        let pivot = (col..m)
            .max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))
            .expect("non-empty range");
        if a[pivot][col].abs() < 1e-14 {
            return Err(AfnError::Grammar(format!("activity `{}` has no absorbing path", act.name)));
        }
        a.swap(col, pivot);
        for r in 0..m {
            if r != col {
                let k = a[r][col] / a[col][col];
                if k != 0.0 {
                    for c in col..=m {
                        a[r][c] -= k * a[col][c];
                    }
                }
            }
        }
    }
    Ok((0..m).map(|i| a[i][m] / a[i][i]).collect())
}

/// Per-second top-1 accuracy of the oracle, by exact enumeration of
/// expected visits and durations. Activities are equally likely.
pub fn oracle_accuracy(grammar: &ActivityGrammar) -> Result<f64> {
    let mut correct = 0.0;
    let mut total = 0.0;
    for act in &grammar.activities {
        let visits = expected_visits(act)?;
        for (k, n) in visits.iter().enumerate() {
            let seconds = n * act.mean_duration(k);
            correct += seconds * row_max(act, k);
            total += seconds;
        }
    }
    Ok(correct / total)
}

/// Monte-Carlo estimate of [`oracle_accuracy`] over `steps` simulated
/// action transitions.
pub fn oracle_accuracy_simulated(grammar: &ActivityGrammar, steps: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let predictions: Vec<Vec<usize>> = grammar
        .activities
        .iter()
        .map(|act| (0..act.len()).map(|k| argmax(&act.transitions[k])).collect())
        .collect();
    let mut correct = 0.0;
    let mut total = 0.0;
    let mut done = 0;
    while done < steps {
        let j = rng.random_range(0..grammar.num_activities());
        let act = &grammar.activities[j];
        let mut state = draw(&act.start, &mut rng);
        while state != act.end_state() && done < steps {
            let (lo, hi) = act.durations[state];
            let d = rng.random_range(lo..=hi) as f64;
            let next = draw(&act.transitions[state], &mut rng);
            if next == predictions[j][state] {
                correct += d;
            }
            total += d;
            state = next;
            done += 1;
        }
    }
    if total == 0.0 {
        return Err(AfnError::Invalid("no simulated seconds".into()));
    }
    Ok(correct / total)
}

fn draw(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let x: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if x < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}
