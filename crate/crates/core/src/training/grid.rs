//! Hyperparameter grid search and head/encoder ablations.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{set_accuracy, train_loop, LossConfig, OptimConfig, PairAccuracy, PairSet};
use crate::corpus::{split_corpus, Corpus, SplitStrategy};
use crate::error::{Error, Result};
use crate::pairgen::{pair_stream, PairPolicy};
use crate::rankhead::{HeadVariant, ModelConfig};

pub const DEFAULT_MARGINS: [f64; 6] = [0.0, 0.1, 1.0, 2.0, 5.0, 10.0];
pub const DEFAULT_LEARNING_RATES: [f64; 9] = [1e-6, 4e-6, 8e-6, 1e-5, 4e-5, 8e-5, 1e-4, 4e-4, 8e-4];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub margins: Vec<f64>,
    pub learning_rates: Vec<f64>,
    /// Training steps per cell.
    pub steps: u64,
    /// Share of contexts held out for validation.
    pub validation_fraction: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            margins: DEFAULT_MARGINS.to_vec(),
            learning_rates: DEFAULT_LEARNING_RATES.to_vec(),
            steps: 500,
            validation_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub margin: f64,
    pub learning_rate: f64,
    pub validation_accuracy: f64,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub cells: Vec<GridCell>,
    pub best: GridCell,
    pub steps: u64,
    pub train_pairs: usize,
    pub validation_pairs: usize,
}

/// True when `a` should be preferred over `b`.
fn better(a: &GridCell, b: &GridCell) -> bool {
    let key = |c: &GridCell| (c.validation_accuracy, !c.diverged);
    let (ka, kb) = (key(a), key(b));
    if ka.0 != kb.0 {
        return ka.0 > kb.0;
    }
    if ka.1 != kb.1 {
        return ka.1;
    }
    if a.learning_rate != b.learning_rate {
        return a.learning_rate < b.learning_rate;
    }
    a.margin < b.margin
}

/// Picks the best cell: highest accuracy, then finite over diverged, then
/// smaller learning rate, then smaller margin.
pub fn select_best(cells: &[GridCell]) -> Option<&GridCell> {
    cells.iter().fold(None, |best, c| match best {
        Some(b) if !better(c, b) => Some(b),
        _ => Some(c),
    })
}

/// Trains one short run per (margin, learning rate) cell on a by-context
/// train/validation split and scores it by validation pair accuracy.
pub fn grid_search(
    corpus: &Corpus,
    grid: &GridConfig,
    model_cfg: &ModelConfig,
    base: &OptimConfig,
    policy: &PairPolicy,
) -> Result<GridReport> {
    if grid.margins.is_empty() || grid.learning_rates.is_empty() {
        return Err(Error::Config("grid search needs at least one margin and one learning rate".into()));
    }
    let (train, val) = split_corpus(corpus, SplitStrategy::ByContext, grid.validation_fraction, base.seed)?;
    let tokenizer = model_cfg.encoder.tokenizer();
    let train_set = PairSet::new(&train, &pair_stream(&train, policy), &tokenizer)?;
    let val_set = PairSet::new(&val, &pair_stream(&val, policy), &tokenizer)?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Empty("grid search split produced no train or validation pairs".into()));
    }
    let coords: Vec<(f64, f64)> = grid
        .learning_rates
        .iter()
        .flat_map(|&lr| grid.margins.iter().map(move |&m| (m, lr)))
        .collect();
    let cells = coords
        .par_iter()
        .map(|&(margin, learning_rate)| {
            let loss = LossConfig { margin };
            let optim = OptimConfig {
                learning_rate,
                max_steps: grid.steps,
                probe_interval: grid.steps.max(1),
                ..base.clone()
            };
            let out = train_loop(&train_set, None, model_cfg, &loss, &optim)?;
            let diverged = out.log.diverged.is_some();
            let validation_accuracy = if diverged {
                0.0
            } else {
                set_accuracy(&out.model, &val_set)?.canonical
            };
            Ok(GridCell {
                margin,
                learning_rate,
                validation_accuracy,
                diverged,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let best = select_best(&cells).cloned().expect("non-empty grid");
    Ok(GridReport {
        cells,
        best,
        steps: grid.steps,
        train_pairs: train_set.len(),
        validation_pairs: val_set.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub name: String,
    pub model: ModelConfig,
    pub accuracy: PairAccuracy,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub runs: Vec<AblationRun>,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub train_pairs: usize,
    pub test_pairs: usize,
}

/// The full model and its two ablations (single linear head, unshared encoders).
pub fn ablation_variants(base: &ModelConfig) -> Vec<(&'static str, ModelConfig)> {
    let mut full = base.clone();
    full.head.variant = HeadVariant::Mlp4;
    full.shared_encoder = true;
    let mut single = full.clone();
    single.head.variant = HeadVariant::SingleLinear;
    let mut unshared = full.clone();
    unshared.shared_encoder = false;
    vec![("full", full), ("single_linear", single), ("unshared", unshared)]
}

/// Trains every ablation variant with the same data, budget and seed and
/// reports test pair accuracy.
pub fn run_ablation(
    train: &Corpus,
    test: &Corpus,
    base: &ModelConfig,
    loss: &LossConfig,
    optim: &OptimConfig,
    policy: &PairPolicy,
) -> Result<AblationReport> {
    let tokenizer = base.encoder.tokenizer();
    let train_set = PairSet::new(train, &pair_stream(train, policy), &tokenizer)?;
    let test_set = PairSet::new(test, &pair_stream(test, policy), &tokenizer)?;
    let runs = ablation_variants(base)
        .into_iter()
        .map(|(name, cfg)| {
            let out = train_loop(&train_set, None, &cfg, loss, optim)?;
            Ok(AblationRun {
                name: name.to_string(),
                accuracy: set_accuracy(&out.model, &test_set)?,
                diverged: out.log.diverged.is_some(),
                model: cfg,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationReport {
        runs,
        loss: *loss,
        optim: optim.clone(),
        train_pairs: train_set.len(),
        test_pairs: test_set.len(),
    })
}
