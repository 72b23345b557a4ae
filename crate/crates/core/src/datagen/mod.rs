//! Synthetic activity grammars, video synthesis, the Bayes next-action
//! oracle, dataset files and train/test/validation splits.

mod grammar;
mod io;
mod oracle;
mod split;
mod video;

pub use grammar::{
    chain_activity, chain_grammar, chain_spec, generate_grammar, two_back_grammar, two_back_spec, ActionLabel, Activity, ActivityGrammar,
    ActivitySpec, GrammarConfig, GrammarSpec,
};
pub use io::{decode_frames, encode_frames, parse_dataset, read_dataset, write_dataset, DATASET_FORMAT, DATASET_VERSION};
pub use oracle::{expected_visits, oracle_accuracy, oracle_accuracy_simulated, oracle_next_distribution, oracle_prediction};
pub use split::{split_dataset, DatasetSplit, DEFAULT_FRACTIONS};
pub use video::{generate_dataset, synthesize_video, Dataset, DatasetMeta, Segment, Video, VideoId, MAX_VIDEO_SECONDS};

use std::path::Path;

use crate::error::{AfnError, Result};

pub fn write_grammar(grammar: &ActivityGrammar, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(grammar).map_err(|e| AfnError::Invalid(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| AfnError::io(path, e))
}

pub fn read_grammar(path: &Path) -> Result<ActivityGrammar> {
    let text = std::fs::read_to_string(path).map_err(|e| AfnError::io(path, e))?;
    let grammar: ActivityGrammar = serde_json::from_str(&text).map_err(|e| AfnError::Parse {
        record: 0,
        reason: e.to_string(),
    })?;
    grammar.validate()?;
    Ok(grammar)
}
