//! Run configuration: one JSON document, overridable from the environment.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use turntree_core::{
    ClipConfig, CreditConfig, Environment, EpisodeLimits, LengthNorm, Objective, PolicyShape, Seeds,
    TrainConfig, TreeConfig, Vocab, World,
};

/// Prefix of environment overrides. Nested keys are joined with `__`, e.g.
/// `TURNTREE_TREE__ALPHA=0.2` or `TURNTREE_LEARNING_RATE=1.5`.
pub const ENV_PREFIX: &str = "TURNTREE_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub total_steps: usize,
    pub seeds: Seeds,
    pub output_dir: PathBuf,

    #[serde(default = "defaults::entity_count")]
    pub entity_count: usize,
    #[serde(default = "defaults::relation_count")]
    pub relation_count: usize,
    #[serde(default = "defaults::max_turns")]
    pub max_turns: usize,
    #[serde(default = "defaults::max_tokens")]
    pub max_tokens: usize,
    /// Hop counts drawn uniformly per prompt.
    #[serde(default = "defaults::hops")]
    pub hops: Vec<usize>,

    #[serde(default)]
    pub objective: Objective,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "defaults::mini_batches")]
    pub mini_batches: usize,
    #[serde(default)]
    pub tree: TreeConfig,
    #[serde(default)]
    pub credit: CreditConfig,
    #[serde(default)]
    pub clip: ClipSection,
    #[serde(default)]
    pub policy: PolicyShape,

    /// Checkpoint interval in steps; 0 writes only the final checkpoint.
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Dump the credited trees of every n-th step to trees.jsonl; 0 disables.
    #[serde(default)]
    pub trees_every: usize,
    #[serde(default = "defaults::eval_tasks")]
    pub eval_tasks: usize,
    #[serde(default)]
    pub eval_seed: u64,
    /// Policy checkpoint (JSON or binary) to start from.
    #[serde(default)]
    pub init_checkpoint: Option<PathBuf>,
    #[serde(default = "defaults::log_level")]
    pub log_level: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClipSection {
    pub eps_low: f64,
    pub eps_high: f64,
    pub length_norm: LengthNorm,
}

impl Default for ClipSection {
    fn default() -> Self {
        let c = ClipConfig::default();
        Self { eps_low: c.eps_low, eps_high: c.eps_high, length_norm: c.length_norm }
    }
}

mod defaults {
    pub fn entity_count() -> usize {
        16
    }
    pub fn relation_count() -> usize {
        4
    }
    pub fn max_turns() -> usize {
        turntree_core::EpisodeLimits::default().max_turns
    }
    pub fn max_tokens() -> usize {
        turntree_core::EpisodeLimits::default().max_tokens
    }
    pub fn hops() -> Vec<usize> {
        vec![1]
    }
    pub fn batch_size() -> usize {
        turntree_core::trainer::DEFAULT_BATCH_SIZE
    }
    pub fn learning_rate() -> f64 {
        turntree_core::trainer::DEFAULT_LEARNING_RATE
    }
    pub fn mini_batches() -> usize {
        1
    }
    pub fn eval_tasks() -> usize {
        500
    }
    pub fn log_level() -> String {
        "info".into()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("environment override {key}: {message}")]
    Override { key: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl RunConfig {
    /// Reads `path`, applies `TURNTREE_*` overrides from `vars` and validates.
    pub fn load<I>(path: &Path, vars: I) -> Result<Self, ConfigError>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Read { path: path.into(), source })?;
        let mut doc: Value = serde_json::from_str(&text)
            .map_err(|e| ConfigError::Parse { path: path.into(), message: e.to_string() })?;
        for (key, raw) in vars {
            if let Some(rest) = key.strip_prefix(ENV_PREFIX) {
                apply_override(&mut doc, rest, &raw)
                    .map_err(|message| ConfigError::Override { key: key.clone(), message })?;
            }
        }
        let cfg: RunConfig = serde_json::from_value(doc)
            .map_err(|e| ConfigError::Parse { path: path.into(), message: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.eval_tasks == 0 {
            return invalid("eval_tasks: must be at least 1".into());
        }
        if !["error", "warn", "info", "debug", "trace", "off"].contains(&self.log_level.as_str()) {
            return invalid(format!("log_level: unknown level {:?}", self.log_level));
        }
        let env = self.environment().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train_config()
            .validate(&env)
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn environment(&self) -> turntree_core::Result<Environment> {
        let vocab = Vocab::new(self.entity_count, self.relation_count)?;
        let limits = EpisodeLimits { max_turns: self.max_turns, max_tokens: self.max_tokens };
        Environment::new(World::new(self.seeds.world, vocab), limits)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            tree: self.tree,
            credit: self.credit,
            clip: ClipConfig {
                eps_low: self.clip.eps_low,
                eps_high: self.clip.eps_high,
                objective: self.objective,
                length_norm: self.clip.length_norm,
            },
            learning_rate: self.learning_rate,
            total_steps: self.total_steps,
            mini_batches: self.mini_batches,
            hops: self.hops.clone(),
            policy: self.policy,
            seeds: self.seeds,
        }
    }
}

/// Sets the (possibly nested) key to `raw`, parsed as JSON when it parses and
/// kept as a string otherwise.
fn apply_override(doc: &mut Value, key: &str, raw: &str) -> Result<(), String> {
    let path: Vec<String> = key.split("__").map(|s| s.to_ascii_lowercase()).collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err("empty key segment".into());
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut at = doc;
    for (i, seg) in path.iter().enumerate() {
        let Value::Object(map) = at else {
            return Err(format!("{} is not an object", path[..i].join(".")));
        };
        if i + 1 == path.len() {
            map.insert(seg.clone(), value);
            return Ok(());
        }
        at = map.entry(seg.clone()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("path has at least one segment")
}
