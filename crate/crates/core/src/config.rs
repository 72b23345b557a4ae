//! Run configuration: one TOML document with a schema version, read with
//! unknown keys rejected, then patched from `AFN_<SECTION>__<KEY>`
//! environment variables.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::{DatasetMeta, GrammarConfig, DEFAULT_FRACTIONS};
use crate::error::{AfnError, Result};
use crate::evaluator::LAMBDA_PRESETS;
use crate::gradcheck::GradCheckConfig;
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

pub const SCHEMA_VERSION: u32 = 1;
pub const ENV_PREFIX: &str = "AFN_";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    Desk,
    Compact,
    /// Shape planning only; never trained.
    PaperShape,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub per_activity: usize,
    pub framerate: u32,
    /// Frame noise standard deviation.
    pub sigma: f64,
    /// Train, test and validation fractions.
    pub split: [f64; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            per_activity: 10,
            framerate: 12,
            sigma: 0.3,
            split: DEFAULT_FRACTIONS,
        }
    }
}

/// Optional replacements for profile dimensions.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelOverrides {
    pub reduce_hidden: Option<usize>,
    pub latent: Option<usize>,
    pub hidden: Option<usize>,
    pub embed_hidden: Option<usize>,
    pub embed: Option<usize>,
    pub dropout: Option<f64>,
    pub memory: Option<bool>,
    pub detach_embedding: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub data: u64,
    pub split: u64,
    pub init: u64,
    pub train: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            data: 1,
            split: 2,
            init: 3,
            train: 4,
        }
    }
}

impl Seeds {
    /// All four seeds derived from one value.
    pub fn from_base(base: u64) -> Self {
        let k = base.wrapping_mul(4);
        Seeds {
            data: k,
            split: k + 1,
            init: k + 2,
            train: k + 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// High-variance threshold; a number or a preset name.
    pub lambda: LambdaSetting,
    /// Bucket width of the time-to-next curve, in seconds.
    pub bin_width: f64,
    /// Training clips per video used to build activity prototypes.
    pub prototypes_per_video: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            lambda: LambdaSetting::Value(2.0),
            bin_width: 1.0,
            prototypes_per_video: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LambdaSetting {
    Value(f64),
    Preset(String),
}

impl LambdaSetting {
    pub fn resolve(&self) -> Result<f64> {
        let value = match self {
            LambdaSetting::Value(v) => *v,
            LambdaSetting::Preset(name) => LAMBDA_PRESETS
                .iter()
                .find(|(n, _)| n == name)
                .map(|&(_, v)| v)
                .ok_or_else(|| AfnError::config("eval.lambda", format!("unknown preset `{name}`")))?,
        };
        if !(value > 0.0 && value.is_finite()) {
            return Err(AfnError::config("eval.lambda", "must be positive"));
        }
        Ok(value)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default = "default_profile")]
    pub profile: Profile,
    #[serde(default)]
    pub grammar: GrammarConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelOverrides,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub gradcheck: GradCheckConfig,
    #[serde(default = "default_out")]
    pub out: PathBuf,
}

fn default_profile() -> Profile {
    Profile::Desk
}

fn default_out() -> PathBuf {
    PathBuf::from("runs/default")
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            profile: Profile::Desk,
            grammar: GrammarConfig::default(),
            data: DataConfig::default(),
            model: ModelOverrides::default(),
            train: TrainConfig::default(),
            seeds: Seeds::default(),
            eval: EvalConfig::default(),
            gradcheck: GradCheckConfig::default(),
            out: default_out(),
        }
    }
}

fn field_error(e: &toml::de::Error) -> AfnError {
    // Point at the innermost key the parser complained about when it can.
    let msg = e.message().to_string();
    let field = msg
        .split('`')
        .nth(1)
        .map(str::to_string)
        .unwrap_or_else(|| "config".into());
    AfnError::config(field, msg)
}

/// Parses a TOML scalar, falling back to a bare string.
fn env_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_override(root: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let path: Vec<String> = key.split("__").map(str::to_lowercase).collect();
    if path.iter().any(String::is_empty) {
        return Err(AfnError::config(key, "malformed override name"));
    }
    let (last, sections) = path.split_last().expect("split yields at least one part");
    let mut table = root;
    for s in sections {
        let entry = table.entry(s.clone()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| AfnError::config(path.join("."), "override descends into a non-table value"))?;
    }
    table.insert(last.clone(), env_value(raw));
    Ok(())
}

impl RunConfig {
    /// Parses `text`, applies `(name, value)` overrides whose name carries
    /// the `AFN_` prefix, and validates.
    pub fn parse_with_env<I>(text: &str, env: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut root: toml::Table = text.parse().map_err(|e: toml::de::Error| field_error(&e))?;
        let mut overrides: Vec<(String, String)> = env
            .into_iter()
            .filter_map(|(k, v)| k.strip_prefix(ENV_PREFIX).map(|rest| (rest.to_string(), v)))
            .collect();
        overrides.sort();
        for (k, v) in &overrides {
            apply_override(&mut root, k, v)?;
        }
        let config: RunConfig = root.try_into().map_err(|e: toml::de::Error| field_error(&e))?;
        config.validate()?;
        Ok(config)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with_env(text, std::iter::empty())
    }

    /// Reads `path` with the process environment applied.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| AfnError::io(path, e))?;
        Self::parse_with_env(&text, std::env::vars())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(AfnError::Version {
                found: self.schema_version,
                expected: SCHEMA_VERSION,
            });
        }
        self.grammar.validate()?;
        if self.data.per_activity == 0 {
            return Err(AfnError::config("data.per_activity", "must be positive"));
        }
        if self.data.framerate < 6 {
            return Err(AfnError::config("data.framerate", "need at least 6 frames per second"));
        }
        if !(self.data.sigma >= 0.0 && self.data.sigma.is_finite()) {
            return Err(AfnError::config("data.sigma", "must be a non-negative number"));
        }
        let total: f64 = self.data.split.iter().sum();
        if self.data.split.iter().any(|&f| f < 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(AfnError::config("data.split", "fractions must be non-negative and sum to 1"));
        }
        self.train.validate()?;
        self.eval.lambda.resolve()?;
        if !(self.eval.bin_width > 0.0) {
            return Err(AfnError::config("eval.bin_width", "must be positive"));
        }
        if self.profile == Profile::PaperShape {
            let fixed = [("model.hidden", self.model.hidden, 256), ("model.latent", self.model.latent, 512)];
            for (field, set, required) in fixed {
                if set.is_some_and(|v| v != required) {
                    return Err(AfnError::config(field, format!("the paper-shape profile fixes this to {required}")));
                }
            }
        }
        let meta = DatasetMeta {
            action_names: vec![String::new(); self.grammar.vocabulary],
            activity_names: vec![String::new(); self.grammar.activities],
            channel_groups: self.grammar.channel_groups.clone(),
            height: self.grammar.height,
            width: self.grammar.width,
            framerate: self.data.framerate,
        };
        self.model_config(&meta).map(|_| ())
    }

    /// Network layout for data described by `meta`.
    pub fn model_config(&self, meta: &DatasetMeta) -> Result<ModelConfig> {
        let actions = meta.num_actions();
        let mut m = match self.profile {
            Profile::Desk => ModelConfig {
                input_channels: meta.channels(),
                height: meta.height,
                width: meta.width,
                ..ModelConfig::desk(actions)
            },
            Profile::Compact => ModelConfig::compact(meta.channels(), meta.height, meta.width, actions),
            Profile::PaperShape => ModelConfig::paper_shape(actions),
        };
        let o = &self.model;
        let set = |dst: &mut usize, v: Option<usize>| {
            if let Some(v) = v {
                *dst = v;
            }
        };
        set(&mut m.reduce_hidden, o.reduce_hidden);
        set(&mut m.latent, o.latent);
        set(&mut m.hidden, o.hidden);
        set(&mut m.embed_hidden, o.embed_hidden);
        set(&mut m.embed, o.embed);
        if let Some(d) = o.dropout {
            m.dropout = d;
        }
        if let Some(b) = o.memory {
            m.memory = b;
        }
        if let Some(b) = o.detach_embedding {
            m.detach_embedding = b;
        }
        m.validate()?;
        Ok(m)
    }
}
