//! Run configuration: built-in defaults, overlaid by an optional JSON file,
//! overlaid by command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use pairrank::corpus::{PassagesPerContext, SyntheticSpec};
use pairrank::evalrank::MetricsConfig;
use pairrank::pairgen::PairPolicy;
use pairrank::rankhead::ModelConfig;
use pairrank::training::{GridConfig, LossConfig, OptimConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::Flags;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConvertConfig {
    pub segments: usize,
    /// Optional segment shares, best segment first.
    pub proportions: Option<Vec<f64>>,
}

impl Default for ConvertConfig {
    fn default() -> Self {
        ConvertConfig {
            segments: 5,
            proportions: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TemporalConfig {
    pub min_items: usize,
}

impl Default for TemporalConfig {
    fn default() -> Self {
        TemporalConfig { min_items: 2 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierSettings {
    pub learning_rate: Option<f64>,
    pub lr_grid: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Source of every random stream; copied into the module seeds.
    pub seed: u64,
    pub data: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Checkpoint to read (eval, rank, convert, temporal) or resume from (train).
    pub model: Option<PathBuf>,
    pub context: Option<String>,
    pub shard_size: Option<usize>,
    pub synthetic: SyntheticSpec,
    pub pairs: PairPolicy,
    pub architecture: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub metrics: MetricsConfig,
    pub temporal: TemporalConfig,
    pub convert: ConvertConfig,
    pub grid: GridConfig,
    pub classifier: ClassifierSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            data: None,
            test: None,
            out: None,
            model: None,
            context: None,
            shard_size: None,
            synthetic: SyntheticSpec::default(),
            pairs: PairPolicy::default(),
            architecture: ModelConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            metrics: MetricsConfig::default(),
            temporal: TemporalConfig::default(),
            convert: ConvertConfig::default(),
            grid: GridConfig::default(),
            classifier: ClassifierSettings::default(),
        }
    }
}

/// Recursively overlays `top` onto `base`. An object that shares no key with
/// the object it lands on replaces it, so enum variants can be switched.
fn overlay(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) if t.keys().any(|k| b.contains_key(k)) || b.is_empty() => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => overlay(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, t) => *slot = t,
    }
}

fn read_file(path: &Path) -> anyhow::Result<Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

/// Flag values that cannot be checked by the argument parser alone.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn parse_list(s: &str, what: &str) -> anyhow::Result<Vec<f64>> {
    s.split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| UsageError(format!("--{what} expects comma-separated numbers, got `{s}`")).into())
}

impl RunConfig {
    pub fn resolve(flags: &Flags) -> anyhow::Result<RunConfig> {
        let mut merged = serde_json::to_value(RunConfig::default())?;
        if let Some(path) = &flags.config {
            overlay(&mut merged, read_file(path)?);
        }
        let mut cfg: RunConfig = serde_json::from_value(merged)
            .map_err(|e| UsageError(format!("invalid configuration: {e}")))?;
        cfg.apply(flags)?;
        cfg.synthetic.seed = cfg.seed;
        cfg.pairs.seed = cfg.seed;
        cfg.optim.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, f: &Flags) -> anyhow::Result<()> {
        macro_rules! set {
            ($flag:expr => $field:expr) => {
                if let Some(v) = $flag.clone() {
                    $field = v.into();
                }
            };
        }
        set!(f.seed => self.seed);
        if let Some(p) = &f.data {
            self.data = Some(p.clone());
        }
        if let Some(p) = &f.test {
            self.test = Some(p.clone());
        }
        if let Some(p) = &f.out {
            self.out = Some(p.clone());
        }
        if let Some(p) = &f.model {
            self.model = Some(p.clone());
        }
        if let Some(c) = &f.context {
            self.context = Some(c.clone());
        }
        if let Some(n) = f.shard_size {
            self.shard_size = Some(n);
        }
        set!(f.k => self.metrics.k);
        set!(f.margin => self.loss.margin);
        set!(f.lr => self.optim.learning_rate);
        set!(f.steps => self.optim.max_steps);
        set!(f.batch_size => self.optim.batch_size);
        set!(f.encoder => self.architecture.encoder.kind);
        set!(f.head => self.architecture.head.variant);
        set!(f.shared_encoder => self.architecture.shared_encoder);
        set!(f.hash_dims => self.architecture.encoder.hash_dims);
        set!(f.embed_dim => self.architecture.encoder.embed_dim);
        set!(f.segments => self.convert.segments);
        set!(f.min_items => self.temporal.min_items);
        set!(f.contexts => self.synthetic.num_contexts);
        set!(f.noise => self.synthetic.noise_rate);
        if let Some(n) = f.per_context {
            self.synthetic.passages_per_context = PassagesPerContext::Fixed(n);
        }
        if f.temporal {
            self.synthetic.temporal = true;
        }
        if f.balanced {
            self.synthetic.balanced = true;
        }
        if let Some(s) = &f.class_probs {
            let v = parse_list(s, "class-probs")?;
            self.synthetic.class_probabilities = v
                .try_into()
                .map_err(|_| UsageError("--class-probs expects exactly 5 values".into()))?;
        }
        if let Some(s) = &f.proportions {
            self.convert.proportions = Some(parse_list(s, "proportions")?);
        }
        if let Some(lr) = f.classifier_lr {
            self.classifier.learning_rate = Some(lr);
        }
        if let Some(s) = &f.classifier_lr_grid {
            self.classifier.lr_grid = parse_list(s, "classifier-lr-grid")?;
        }
        Ok(())
    }

    fn validate(&self) -> anyhow::Result<()> {
        let usage = |e: pairrank::Error| UsageError(e.to_string());
        self.architecture.validate().map_err(usage)?;
        self.loss.validate().map_err(usage)?;
        self.optim.validate().map_err(usage)?;
        self.metrics.validate().map_err(usage)?;
        self.pairs.validate().map_err(usage)?;
        if self.convert.segments < 2 {
            bail!(UsageError("--segments must be at least 2".into()));
        }
        if self.temporal.min_items < 2 {
            bail!(UsageError("--min-items must be at least 2".into()));
        }
        Ok(())
    }

    pub fn require<'a>(&self, field: &'a Option<PathBuf>, flag: &str) -> anyhow::Result<&'a Path> {
        match field {
            Some(p) => Ok(p.as_path()),
            None => bail!(UsageError(format!("--{flag} is required"))),
        }
    }
}
