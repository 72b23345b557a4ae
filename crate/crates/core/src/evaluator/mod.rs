//! Metrics and evaluation protocols.
//!
//! [`evaluate`] runs a [`Predictor`] over test videos, one fresh memory and a
//! sequential cursor per video, and yields one [`PredictionRecord`] per
//! second. [`build_report`] turns the records into every metric and
//! [`write_report`] emits them as CSV (plus two SVG plots).

mod inference;
mod metrics;
mod report;

pub use inference::*;
pub use metrics::*;
pub use report::*;
