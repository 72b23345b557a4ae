use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datagen::{ActionLabel, VideoId};
use crate::error::{AfnError, Result};

/// One evaluated second of a test video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub video: VideoId,
    pub t: usize,
    pub activity: usize,
    pub pred_activity: Option<usize>,
    pub y_current: ActionLabel,
    pub pred_current: Option<ActionLabel>,
    pub y_next: ActionLabel,
    pub pred_next: Option<ActionLabel>,
    pub straddle: bool,
    pub horizon_fraction: f64,
    pub time_to_next_start: f64,
}

impl PredictionRecord {
    pub fn current_correct(&self) -> bool {
        self.pred_current == Some(self.y_current)
    }

    pub fn next_correct(&self) -> bool {
        self.pred_next == Some(self.y_next)
    }
}

/// Fixed one-second anticipation as a fraction of the mean video length.
pub fn delta_minus(mean_video_length: f64) -> Result<f64> {
    if !(mean_video_length > 0.0 && mean_video_length.is_finite()) {
        return Err(AfnError::Invalid(format!(
            "mean video length must be positive, got {mean_video_length}"
        )));
    }
    Ok(1.0 / mean_video_length)
}

fn fraction(records: &[&PredictionRecord], ok: impl Fn(&PredictionRecord) -> bool) -> Result<f64> {
    if records.is_empty() {
        return Err(AfnError::Invalid("no records to score".into()));
    }
    Ok(records.iter().filter(|r| ok(r)).count() as f64 / records.len() as f64)
}

fn scored(records: &[PredictionRecord]) -> Vec<&PredictionRecord> {
    records.iter().filter(|r| !r.straddle).collect()
}

/// Fraction of non-straddling records whose current action is right.
pub fn anticipation_accuracy(records: &[PredictionRecord]) -> Result<f64> {
    fraction(&scored(records), PredictionRecord::current_correct)
}

/// Fraction of non-straddling records whose next action is right.
pub fn forecasting_accuracy(records: &[PredictionRecord]) -> Result<f64> {
    fraction(&scored(records), PredictionRecord::next_correct)
}

/// Next-action accuracy over all records, straddling ones counted wrong.
pub fn forecasting_accuracy_all(records: &[PredictionRecord]) -> Result<f64> {
    let all: Vec<&PredictionRecord> = records.iter().collect();
    fraction(&all, |r| !r.straddle && r.next_correct())
}

/// Fraction of records whose activity was predicted correctly.
pub fn activity_accuracy(records: &[PredictionRecord]) -> Result<f64> {
    let with: Vec<&PredictionRecord> = records.iter().filter(|r| r.pred_activity.is_some()).collect();
    fraction(&with, |r| r.pred_activity == Some(r.activity))
}

/// Jump-in bins by remaining fraction of the current action.
/// The fourth bin is open at 0.01: a fraction of exactly 0.01 goes to the
/// third, whose lower edge is closed.
pub const BIN_LABELS: [&str; 4] = ["[0.90,1.00]", "[0.50,0.90)", "[0.01,0.50)", "(0,0.01)"];

pub fn bin_of(horizon_fraction: f64) -> Option<usize> {
    let h = horizon_fraction;
    if (0.90..=1.0).contains(&h) {
        Some(0)
    } else if (0.50..0.90).contains(&h) {
        Some(1)
    } else if (0.01..0.50).contains(&h) {
        Some(2)
    } else if h > 0.0 && h < 0.01 {
        Some(3)
    } else {
        None
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BinStat {
    pub bin: &'static str,
    pub count: usize,
    pub correct: usize,
    /// `None` for an empty bin.
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct JumpInReport {
    pub bins: [BinStat; 4],
    /// Straddling records; they contribute no correct prediction.
    pub discarded: usize,
}

impl JumpInReport {
    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum::<usize>() + self.discarded
    }
}

/// Next-action accuracy per jump-in bin.
pub fn jump_in_bins(records: &[PredictionRecord]) -> Result<JumpInReport> {
    let mut counts = [(0usize, 0usize); 4];
    let mut discarded = 0;
    for r in records {
        if r.straddle {
            discarded += 1;
            continue;
        }
        let b = bin_of(r.horizon_fraction).ok_or_else(|| {
            AfnError::Invalid(format!("horizon fraction {} of video {} t={} outside (0, 1]", r.horizon_fraction, r.video, r.t))
        })?;
        counts[b].0 += 1;
        counts[b].1 += usize::from(r.next_correct());
    }
    let bins = std::array::from_fn(|i| BinStat {
        bin: BIN_LABELS[i],
        count: counts[i].0,
        correct: counts[i].1,
        accuracy: (counts[i].0 > 0).then(|| counts[i].1 as f64 / counts[i].0 as f64),
    });
    Ok(JumpInReport { bins, discarded })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Level {
    /// Current action; classes are actions plus END.
    Current,
    /// Next action; classes are actions plus END.
    Next,
    Activity,
}

/// Rows are truth, columns predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn size(&self) -> usize {
        self.labels.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.size()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sum(&self, row: usize) -> u64 {
        self.counts[row].iter().sum()
    }

    /// `count / row sum`, 0 for empty rows.
    pub fn rate(&self, row: usize, col: usize) -> f64 {
        let s = self.row_sum(row);
        if s == 0 {
            0.0
        } else {
            self.counts[row][col] as f64 / s as f64
        }
    }
}

/// Confusion matrix of the non-straddling records that carry a prediction
/// at `level`. `labels` names every class.
pub fn confusion(records: &[PredictionRecord], level: Level, labels: &[String]) -> Result<ConfusionMatrix> {
    if records.is_empty() {
        return Err(AfnError::Invalid("confusion matrix of zero records".into()));
    }
    let k = labels.len();
    let mut counts = vec![vec![0u64; k]; k];
    for r in records.iter().filter(|r| !r.straddle) {
        let (truth, pred) = match level {
            Level::Current => (r.y_current, r.pred_current),
            Level::Next => (r.y_next, r.pred_next),
            Level::Activity => (r.activity, r.pred_activity),
        };
        let Some(pred) = pred else { continue };
        if truth >= k || pred >= k {
            return Err(AfnError::Lookup(format!("label {} outside {k} classes", truth.max(pred))));
        }
        counts[truth][pred] += 1;
    }
    Ok(ConfusionMatrix {
        labels: labels.to_vec(),
        counts,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    pub from: f64,
    pub to: f64,
    pub count: usize,
    pub correct: usize,
    pub accuracy: f64,
}

/// Next-action accuracy against seconds to the next action's start, in
/// buckets `[k·width, (k+1)·width)`. Empty buckets are omitted.
pub fn time_to_next_curve(records: &[PredictionRecord], bin_width: f64) -> Result<Vec<CurvePoint>> {
    if !(bin_width > 0.0) {
        return Err(AfnError::Invalid(format!("bin width must be positive, got {bin_width}")));
    }
    let mut buckets: BTreeMap<u64, (usize, usize)> = BTreeMap::new();
    for r in records.iter().filter(|r| !r.straddle) {
        let k = (r.time_to_next_start / bin_width).floor().max(0.0) as u64;
        let e = buckets.entry(k).or_default();
        e.0 += 1;
        e.1 += usize::from(r.next_correct());
    }
    Ok(buckets
        .into_iter()
        .map(|(k, (count, correct))| CurvePoint {
            from: k as f64 * bin_width,
            to: (k + 1) as f64 * bin_width,
            count,
            correct,
            accuracy: correct as f64 / count as f64,
        })
        .collect())
}

/// Ratio thresholds used with real datasets of different pacing.
pub const LAMBDA_PRESETS: [(&str, f64); 3] = [("mpii", 2.0), ("breakfast", 0.82), ("charades", 0.94)];

#[derive(Clone, Debug, PartialEq)]
pub struct HighVariance {
    /// Mean gap `μ_A` between the end of the anticipation window and the
    /// next action's start, per action with valid occurrences.
    pub means: BTreeMap<ActionLabel, f64>,
    pub selected: Vec<ActionLabel>,
    /// Actions whose every occurrence is followed by END.
    pub excluded: Vec<ActionLabel>,
}

/// Gap between the end of the window `[t, t+1)` and the next action's
/// start; negative when no action follows.
pub fn delta_a(record: &PredictionRecord, end_label: ActionLabel) -> f64 {
    if record.y_next == end_label {
        -1.0
    } else {
        record.time_to_next_start - 1.0
    }
}

/// Actions `A` whose `μ_A / μ_B > λ` for at least half (rounded up) of the
/// other actions `B`.
pub fn high_variance_actions(records: &[PredictionRecord], lambda: f64, end_label: ActionLabel) -> Result<HighVariance> {
    if !(lambda > 0.0) {
        return Err(AfnError::Invalid(format!("λ must be positive, got {lambda}")));
    }
    let mut sums: BTreeMap<ActionLabel, (f64, usize)> = BTreeMap::new();
    let mut seen: BTreeMap<ActionLabel, ()> = BTreeMap::new();
    for r in records.iter().filter(|r| !r.straddle) {
        seen.insert(r.y_current, ());
        let d = delta_a(r, end_label);
        if d >= 0.0 {
            let e = sums.entry(r.y_current).or_default();
            e.0 += d;
            e.1 += 1;
        }
    }
    let means: BTreeMap<ActionLabel, f64> = sums.into_iter().map(|(a, (s, n))| (a, s / n as f64)).collect();
    let excluded: Vec<ActionLabel> = seen.keys().filter(|a| !means.contains_key(a)).copied().collect();
    let others = means.len().saturating_sub(1);
    let needed = others.div_ceil(2);
    let selected = means
        .iter()
        .filter(|&(&a, &mu_a)| {
            let wins = means
                .iter()
                .filter(|&(&b, &mu_b)| b != a && ratio_exceeds(mu_a, mu_b, lambda))
                .count();
            others > 0 && wins >= needed
        })
        .map(|(&a, _)| a)
        .collect();
    Ok(HighVariance {
        means,
        selected,
        excluded,
    })
}

fn ratio_exceeds(mu_a: f64, mu_b: f64, lambda: f64) -> bool {
    if mu_b == 0.0 {
        mu_a > 0.0
    } else {
        mu_a / mu_b > lambda
    }
}
