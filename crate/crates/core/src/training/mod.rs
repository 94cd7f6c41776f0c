//! Margin ranking loss, gradients, AdamW and the training loop.

mod checkpoint;
mod grid;

pub use checkpoint::{checkpoint_load, checkpoint_save, Checkpoint, CheckpointMeta, FORMAT_VERSION, MAGIC};
pub use grid::{
    grid_search, run_ablation, AblationReport, AblationRun, GridCell, GridConfig, GridReport,
    DEFAULT_LEARNING_RATES, DEFAULT_MARGINS,
};

use std::collections::{BTreeSet, HashMap};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::encoder::{TokenSeq, Tokenizer};
use crate::error::{Error, Result};
use crate::nn::{GradBuf, Grads, Mode, ParamStore};
use crate::pairgen::{Label, PassagePair};
use crate::rankhead::{margin_from_scores, BatchCache, Latent, ModelConfig, ModelParams, ScorePair};
use crate::seeding::{self, tags};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub margin: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { margin: 2.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.margin >= 0.0 && self.margin.is_finite() {
            Ok(())
        } else {
            Err(Error::Config(format!("margin {} must be finite and >= 0", self.margin)))
        }
    }
}

/// `max(0, -E (f_first - f_second) + margin)`.
pub fn margin_loss(scores: ScorePair, label: Label, cfg: &LossConfig) -> f64 {
    (-label.sign() * scores.diff() + cfg.margin).max(0.0)
}

/// Loss plus its partial derivatives with respect to both scores.
fn margin_loss_and_grad(scores: ScorePair, label: Label, cfg: &LossConfig) -> (f64, (f64, f64)) {
    let e = label.sign();
    let v = -e * scores.diff() + cfg.margin;
    if v > 0.0 {
        (v, (-e, e))
    } else {
        (0.0, (0.0, 0.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub probe_interval: u64,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            learning_rate: 4e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            batch_size: 32,
            max_steps: 2000,
            probe_interval: 500,
            seed: 42,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if self.learning_rate * self.weight_decay > 1.0 {
            return bad("learning_rate * weight_decay must not exceed 1");
        }
        if self.batch_size == 0 || self.probe_interval == 0 {
            return bad("batch_size and probe_interval must be positive");
        }
        Ok(())
    }
}

/// One labeled pair of token sequences.
#[derive(Debug, Clone, Copy)]
pub struct BatchPair<'a> {
    pub first: &'a TokenSeq,
    pub second: &'a TokenSeq,
    pub label: Label,
}

#[derive(Debug, Clone)]
pub struct GradientOutput {
    /// Summed hinge loss over the batch.
    pub loss: f64,
    pub grads: Grads,
    pub cache: BatchCache,
    pub active_pairs: usize,
}

/// Train-mode gradients of the summed batch loss. The model is not modified.
pub fn compute_gradients(
    model: &ModelParams,
    batch: &[BatchPair<'_>],
    cfg: &LossConfig,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<GradientOutput> {
    let pairs: Vec<(&TokenSeq, &TokenSeq)> = batch.iter().map(|p| (p.first, p.second)).collect();
    let (scores, cache) = model.forward_batch(&pairs, Mode::Train, rng)?;
    let mut loss = 0.0;
    let mut d = Vec::with_capacity(batch.len());
    let mut active = 0;
    for (s, p) in scores.iter().zip(batch) {
        let (l, g) = margin_loss_and_grad(*s, p.label, cfg);
        loss += l;
        if l > 0.0 {
            active += 1;
        }
        d.push(g);
    }
    let mut grads = Grads::zeros_like(&model.store);
    if active > 0 {
        model.backward(&cache, &d, &mut grads);
    }
    Ok(GradientOutput {
        loss,
        grads,
        cache,
        active_pairs: active,
    })
}

/// AdamW moments and step counter, aligned with a model's parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub step: u64,
    /// First moments; empty for non-trainable tensors.
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    /// Rows of row-sparse tensors that have non-zero moments.
    active_rows: Vec<BTreeSet<usize>>,
}

impl OptimState {
    pub fn new(store: &ParamStore) -> Self {
        let alloc = |p: &crate::nn::Param| if p.trainable { vec![0.0; p.len()] } else { Vec::new() };
        OptimState {
            step: 0,
            m: store.iter().map(alloc).collect(),
            v: store.iter().map(alloc).collect(),
            active_rows: vec![BTreeSet::new(); store.len()],
        }
    }

    /// Rebuilds state from stored moments.
    pub fn from_moments(store: &ParamStore, step: u64, m: Vec<Vec<f32>>, v: Vec<Vec<f32>>) -> Result<Self> {
        let mut state = OptimState {
            step,
            m,
            v,
            active_rows: vec![BTreeSet::new(); store.len()],
        };
        state.check(store)?;
        for (i, p) in store.iter().enumerate() {
            if p.trainable && p.row_sparse {
                let w = p.row_width();
                for r in 0..p.len() / w {
                    let live = |x: &[f32]| x[r * w..(r + 1) * w].iter().any(|&x| x != 0.0);
                    if live(&state.m[i]) || live(&state.v[i]) {
                        state.active_rows[i].insert(r);
                    }
                }
            }
        }
        Ok(state)
    }

    fn check(&self, store: &ParamStore) -> Result<()> {
        if self.m.len() != store.len() || self.v.len() != store.len() {
            return Err(Error::Shape("optimizer state does not match the model".into()));
        }
        for (i, p) in store.iter().enumerate() {
            let want = if p.trainable { p.len() } else { 0 };
            if self.m[i].len() != want || self.v[i].len() != want {
                return Err(Error::Shape(format!("optimizer moments for `{}` have the wrong size", p.name)));
            }
        }
        Ok(())
    }
}

struct AdamCoeffs {
    lr: f64,
    b1: f64,
    b2: f64,
    eps: f64,
    bc1: f64,
    bc2: f64,
}

impl AdamCoeffs {
    /// New (parameter, first moment, second moment).
    #[inline]
    fn next(&self, p: f32, m: f32, v: f32, g: f64) -> (f32, f32, f32) {
        let m = (self.b1 * f64::from(m) + (1.0 - self.b1) * g) as f32;
        let v = (self.b2 * f64::from(v) + (1.0 - self.b2) * g * g) as f32;
        let mhat = f64::from(m) / self.bc1;
        let vhat = f64::from(v) / self.bc2;
        ((f64::from(p) - self.lr * mhat / (vhat.sqrt() + self.eps)) as f32, m, v)
    }

    #[inline]
    fn apply(&self, p: &mut f32, m: &mut f32, v: &mut f32, g: f64) {
        (*p, *m, *v) = self.next(*p, *m, *v, g);
    }
}

#[inline]
fn decayed(x: f32, decay: f64) -> f32 {
    let x64 = f64::from(x);
    (x64 - decay * x64) as f32
}

/// One decoupled-weight-decay Adam update.
///
/// Each coordinate is first decayed, `p <- p - lr*wd*p`, then moved by the
/// bias-corrected moment ratio. Rows of an embedding table that have never
/// received a gradient have zero moments, so for them the second phase is the
/// identity and is skipped.
pub fn adamw_step(state: &mut OptimState, model: &mut ModelParams, grads: &Grads, cfg: &OptimConfig) -> Result<()> {
    adamw_update(state, &mut model.store, grads, cfg)
}

/// [`adamw_step`] on a bare parameter store.
///
/// Nothing is written when any updated value would be non-finite; that case
/// returns [`Error::NonFinite`] with the parameters and state untouched.
pub fn adamw_update(state: &mut OptimState, store: &mut ParamStore, grads: &Grads, cfg: &OptimConfig) -> Result<()> {
    state.check(store)?;
    if grads.len() != store.len() {
        return Err(Error::Shape("gradient set does not match the model".into()));
    }
    let t = (state.step + 1) as i32;
    let c = AdamCoeffs {
        lr: cfg.learning_rate,
        b1: cfg.beta1,
        b2: cfg.beta2,
        eps: cfg.eps,
        bc1: 1.0 - cfg.beta1.powi(t),
        bc2: 1.0 - cfg.beta2.powi(t),
    };
    let decay = cfg.learning_rate * cfg.weight_decay;
    preflight(state, store, grads, &c, decay)?;
    state.step += 1;
    for (i, p) in store.iter_mut().enumerate() {
        if !p.trainable {
            continue;
        }
        if decay != 0.0 {
            for x in p.data.iter_mut() {
                *x = decayed(*x, decay);
            }
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        match grads.buf(i) {
            GradBuf::Dense(g) => {
                if g.len() != p.data.len() {
                    return Err(Error::Shape(format!("gradient for `{}` has the wrong size", p.name)));
                }
                for j in 0..g.len() {
                    c.apply(&mut p.data[j], &mut m[j], &mut v[j], g[j]);
                }
            }
            GradBuf::Rows { width, rows } => {
                let w = *width;
                let active = &mut state.active_rows[i];
                active.extend(rows.keys().copied());
                for &r in active.iter() {
                    let g = rows.get(&r);
                    for k in 0..w {
                        let j = r * w + k;
                        c.apply(&mut p.data[j], &mut m[j], &mut v[j], g.map_or(0.0, |g| g[k]));
                    }
                }
            }
            GradBuf::Frozen => {
                return Err(Error::Shape(format!("no gradient slot for trainable `{}`", p.name)));
            }
        }
    }
    Ok(())
}

/// Checks that an update would leave every touched value finite.
fn preflight(state: &OptimState, store: &ParamStore, grads: &Grads, c: &AdamCoeffs, decay: f64) -> Result<()> {
    let finite = |(p, m, v): (f32, f32, f32)| p.is_finite() && m.is_finite() && v.is_finite();
    for (i, p) in store.iter().enumerate() {
        if !p.trainable {
            continue;
        }
        let (m, v) = (&state.m[i], &state.v[i]);
        let ok = match grads.buf(i) {
            GradBuf::Dense(g) if g.len() != p.data.len() => {
                return Err(Error::Shape(format!("gradient for `{}` has the wrong size", p.name)));
            }
            GradBuf::Dense(g) => (0..g.len()).all(|j| finite(c.next(decayed(p.data[j], decay), m[j], v[j], g[j]))),
            GradBuf::Rows { width, rows } => rows.iter().all(|(&r, g)| {
                (0..*width).all(|k| {
                    let j = r * width + k;
                    finite(c.next(decayed(p.data[j], decay), m[j], v[j], g[k]))
                })
            }),
            GradBuf::Frozen => {
                return Err(Error::Shape(format!("no gradient slot for trainable `{}`", p.name)));
            }
        };
        if !ok {
            return Err(Error::NonFinite {
                context: format!("update of `{}`", p.name),
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IndexedPair {
    pub first: usize,
    pub second: usize,
    pub label: Label,
}

/// Pre-tokenized passages plus labeled pairs referring to them by index.
#[derive(Debug, Clone)]
pub struct PairSet {
    ids: Vec<String>,
    tokens: Vec<TokenSeq>,
    pairs: Vec<IndexedPair>,
}

impl PairSet {
    pub fn new(corpus: &Corpus, pairs: &[PassagePair], tokenizer: &Tokenizer) -> Result<Self> {
        let index = corpus.index();
        let tokens: Vec<TokenSeq> = corpus
            .passages()
            .par_iter()
            .map(|p| tokenizer.tokenize(&p.text))
            .collect();
        let lookup = |id: &str| index.get(id).copied().ok_or_else(|| Error::UnknownPassage(id.to_string()));
        let pairs = pairs
            .iter()
            .map(|p| {
                Ok(IndexedPair {
                    first: lookup(&p.first)?,
                    second: lookup(&p.second)?,
                    label: p.label,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PairSet {
            ids: corpus.passages().iter().map(|p| p.id.clone()).collect(),
            tokens,
            pairs,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[IndexedPair] {
        &self.pairs
    }

    pub fn tokens(&self, passage: usize) -> &TokenSeq {
        &self.tokens[passage]
    }

    pub fn id(&self, passage: usize) -> &str {
        &self.ids[passage]
    }

    pub fn batch_pair(&self, p: &IndexedPair) -> BatchPair<'_> {
        BatchPair {
            first: &self.tokens[p.first],
            second: &self.tokens[p.second],
            label: p.label,
        }
    }
}

/// Eval-mode latents for every listed token sequence, in input order.
pub fn encode_all(model: &ModelParams, seqs: &[&TokenSeq]) -> Result<Vec<Latent>> {
    seqs.par_iter().map(|t| model.encode_latent(t)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairAccuracy {
    /// Sign of `f(first) - f(second)` in the presented order matches the label.
    pub canonical: f64,
    /// Sign of the symmetrized margin matches the label.
    pub symmetrized: f64,
    pub pairs: usize,
}

const SCORE_CHUNK: usize = 512;

/// Pair accuracy over a [`PairSet`]; zero differences count as wrong.
pub fn set_accuracy(model: &ModelParams, set: &PairSet) -> Result<PairAccuracy> {
    if set.is_empty() {
        return Err(Error::Empty("no pairs to evaluate".into()));
    }
    let mut used: Vec<usize> = set.pairs.iter().flat_map(|p| [p.first, p.second]).collect();
    used.sort_unstable();
    used.dedup();
    let seqs: Vec<&TokenSeq> = used.iter().map(|&i| &set.tokens[i]).collect();
    let latents = encode_all(model, &seqs)?;
    let slot: HashMap<usize, usize> = used.iter().enumerate().map(|(k, &i)| (i, k)).collect();
    let correct: Vec<(usize, usize)> = set
        .pairs
        .par_chunks(SCORE_CHUNK)
        .map(|chunk| {
            let mut items = Vec::with_capacity(2 * chunk.len());
            for p in chunk {
                let a = &latents[slot[&p.first]];
                let b = &latents[slot[&p.second]];
                items.push((a, b));
                items.push((b, a));
            }
            let s = model.score_latents(&items)?;
            let mut canon = 0;
            let mut sym = 0;
            for (k, p) in chunk.iter().enumerate() {
                let e = p.label.sign();
                if e * s[2 * k].diff() > 0.0 {
                    canon += 1;
                }
                if e * margin_from_scores(s[2 * k], s[2 * k + 1]) > 0.0 {
                    sym += 1;
                }
            }
            Ok((canon, sym))
        })
        .collect::<Result<Vec<_>>>()?;
    let (c, s) = correct.iter().fold((0, 0), |(a, b), (x, y)| (a + x, b + y));
    let n = set.len() as f64;
    Ok(PairAccuracy {
        canonical: c as f64 / n,
        symmetrized: s as f64 / n,
        pairs: set.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: u64,
    /// Mean summed batch loss over the steps since the previous entry.
    pub mean_loss: f64,
    pub probe_accuracy: Option<f64>,
    pub elapsed_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
    /// Set when training stopped on a non-finite value; parameters are the last finite ones.
    pub diverged: Option<String>,
    pub steps_completed: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ModelParams,
    pub state: OptimState,
    pub log: TrainLog,
}

/// Initializes a model from `optim.seed` and trains it.
pub fn train_loop(
    train: &PairSet,
    probe: Option<&PairSet>,
    model_cfg: &ModelConfig,
    loss_cfg: &LossConfig,
    optim_cfg: &OptimConfig,
) -> Result<TrainOutcome> {
    let model = ModelParams::init(model_cfg, optim_cfg.seed)?;
    let state = OptimState::new(&model.store);
    continue_training(model, state, train, probe, loss_cfg, optim_cfg)
}

/// Trains until `state.step` reaches `optim_cfg.max_steps`.
///
/// Batches are consecutive slices of a per-epoch shuffle of `train`; a
/// trailing partial batch is dropped unless the set is smaller than one batch.
pub fn continue_training(
    mut model: ModelParams,
    mut state: OptimState,
    train: &PairSet,
    probe: Option<&PairSet>,
    loss_cfg: &LossConfig,
    optim_cfg: &OptimConfig,
) -> Result<TrainOutcome> {
    loss_cfg.validate()?;
    optim_cfg.validate()?;
    if train.is_empty() && state.step < optim_cfg.max_steps {
        return Err(Error::Empty("no training pairs".into()));
    }
    let started = Instant::now();
    let bs = optim_cfg.batch_size.min(train.len()).max(1);
    let per_epoch = (train.len() / bs).max(1) as u64;
    let mut log = TrainLog::default();
    let mut loss_sum = 0.0;
    let mut loss_steps = 0u64;
    let mut order: Vec<usize> = Vec::new();
    let mut epoch = u64::MAX;

    while state.step < optim_cfg.max_steps {
        let step = state.step;
        let e = step / per_epoch;
        if e != epoch {
            epoch = e;
            order = (0..train.len()).collect();
            order.shuffle(&mut seeding::rng(optim_cfg.seed, tags::EPOCH_SHUFFLE, e));
        }
        let offset = ((step % per_epoch) as usize) * bs;
        let batch: Vec<BatchPair<'_>> = order[offset..offset + bs]
            .iter()
            .map(|&i| train.batch_pair(&train.pairs[i]))
            .collect();
        let mut rng = seeding::rng(optim_cfg.seed, tags::DROPOUT, step);
        let out = match compute_gradients(&model, &batch, loss_cfg, Some(&mut rng)) {
            Ok(o) => o,
            Err(Error::NonFinite { context }) => {
                log.diverged = Some(format!("step {}: non-finite {context}", step + 1));
                break;
            }
            Err(e) => return Err(e),
        };
        if !out.loss.is_finite() || !out.grads.all_finite() {
            let what = out
                .grads
                .name_of_first_non_finite(&model.store)
                .map_or_else(|| "loss".to_string(), |n| format!("gradient of `{n}`"));
            log.diverged = Some(format!("step {}: non-finite {what}", step + 1));
            break;
        }
        match adamw_step(&mut state, &mut model, &out.grads, optim_cfg) {
            Ok(()) => {}
            Err(Error::NonFinite { context }) => {
                log.diverged = Some(format!("step {}: non-finite {context}", step + 1));
                break;
            }
            Err(e) => return Err(e),
        }
        model.update_running_stats(&out.cache);
        loss_sum += out.loss;
        loss_steps += 1;

        let done = state.step == optim_cfg.max_steps;
        if state.step % optim_cfg.probe_interval == 0 || done {
            let probe_accuracy = match probe {
                Some(p) if !p.is_empty() => Some(set_accuracy(&model, p)?.canonical),
                _ => None,
            };
            log.entries.push(LogEntry {
                step: state.step,
                mean_loss: loss_sum / loss_steps.max(1) as f64,
                probe_accuracy,
                elapsed_secs: started.elapsed().as_secs_f64(),
            });
            loss_sum = 0.0;
            loss_steps = 0;
        }
    }
    log.steps_completed = state.step;
    Ok(TrainOutcome { model, state, log })
}
