//! Context-aggregating head: maps `[z_a ‖ z_b]` to the score pair
//! `(f(a), f(b))`, plus the full model bundle (encoders + head).

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncodeCache, Encoder, EncoderConfig, TokenSeq};
use crate::error::{Error, Result};
use crate::nn::{DenseBlock, DenseBlockCache, Grads, Linear, Mat, Mode, NormSettings, ParamStore};
use crate::seeding::{self, tags};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadVariant {
    Mlp4,
    SingleLinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub variant: HeadVariant,
    pub dropout_rate: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub prelu_init: f32,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            variant: HeadVariant::Mlp4,
            dropout_rate: 0.2,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            prelu_init: 0.25,
        }
    }
}

impl HeadConfig {
    pub fn norm_settings(&self) -> NormSettings {
        NormSettings {
            eps: self.bn_eps,
            momentum: self.bn_momentum,
            prelu_init: self.prelu_init,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    pub shared_encoder: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            head: HeadConfig::default(),
            shared_encoder: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let h = &self.head;
        if !(0.0..1.0).contains(&h.dropout_rate) {
            return Err(Error::Config("head dropout_rate must lie in [0, 1)".into()));
        }
        if !(h.bn_eps > 0.0) || !(0.0..=1.0).contains(&h.bn_momentum) {
            return Err(Error::Config("batch-norm eps must be positive and momentum in [0, 1]".into()));
        }
        if !h.prelu_init.is_finite() {
            return Err(Error::Config("prelu_init must be finite".into()));
        }
        if h.variant == HeadVariant::Mlp4 && self.encoder.embed_dim < 2 {
            return Err(Error::Config("mlp4 head needs embed_dim >= 2".into()));
        }
        Ok(())
    }

    /// Layer widths of the head, input first.
    pub fn head_widths(&self) -> Vec<usize> {
        let d = self.encoder.embed_dim;
        match self.head.variant {
            HeadVariant::Mlp4 => vec![2 * d, 2 * d, d, d / 2, 2],
            HeadVariant::SingleLinear => vec![2 * d, 2],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScorePair {
    pub score_first: f64,
    pub score_second: f64,
}

impl ScorePair {
    /// `f(first) - f(second)`.
    pub fn diff(&self) -> f64 {
        self.score_first - self.score_second
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub variant: HeadVariant,
    pub blocks: Vec<DenseBlock>,
    pub out: Linear,
    pub dropout_rate: f64,
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    blocks: Vec<DenseBlockCache>,
    out_input: Mat,
}

impl HeadCache {
    pub fn rectifier_pattern(&self) -> Vec<bool> {
        self.blocks.iter().flat_map(|b| b.rectifier_pattern()).collect()
    }
}

impl BatchCache {
    /// Sign pattern of every head rectifier input in this batch.
    pub fn rectifier_pattern(&self) -> Vec<bool> {
        self.head.rectifier_pattern()
    }
}

impl Head {
    fn new(store: &mut ParamStore, config: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let widths = config.head_widths();
        let norm = config.head.norm_settings();
        let hidden = widths.len() - 2;
        let blocks = (0..hidden)
            .map(|i| {
                DenseBlock::new(store, &format!("head.block{i}"), widths[i], widths[i + 1], &norm, rng)
            })
            .collect();
        let out = Linear::new(store, "head.out", widths[hidden], 2, rng);
        Head {
            variant: config.head.variant,
            blocks,
            out,
            dropout_rate: config.head.dropout_rate,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.blocks.first().map_or(self.out.in_dim, |b| b.linear.in_dim)
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        x: Mat,
        mode: Mode,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> (Mat, HeadCache) {
        let mut h = x;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (next, c) = b.forward(store, h, mode, self.dropout_rate, rng.as_deref_mut());
            h = next;
            caches.push(c);
        }
        let y = self.out.forward(store, &h);
        (
            y,
            HeadCache {
                blocks: caches,
                out_input: h,
            },
        )
    }

    pub fn backward(&self, store: &ParamStore, cache: &HeadCache, dy: &Mat, grads: &mut Grads) -> Mat {
        let mut d = self.out.backward(store, &cache.out_input, dy, grads);
        for (b, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            d = b.backward(store, c, d, grads);
        }
        d
    }

    fn first_linear(&self) -> &Linear {
        self.blocks.first().map_or(&self.out, |b| &b.linear)
    }
}

/// Encoder output(s) for one passage, in eval mode.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    pub a: Vec<f64>,
    /// Second-slot latent; `None` when the encoder is shared.
    pub b: Option<Vec<f64>>,
}

impl Latent {
    pub fn first_slot(&self) -> &[f64] {
        &self.a
    }

    pub fn second_slot(&self) -> &[f64] {
        self.b.as_deref().unwrap_or(&self.a)
    }
}

/// A passage's contribution to the head's first linear layer, for each slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Projected {
    first: Vec<f64>,
    second: Vec<f64>,
}

/// Forward state for one training batch.
#[derive(Debug, Clone)]
pub struct BatchCache {
    first: Vec<EncodeCache>,
    second: Vec<EncodeCache>,
    head: HeadCache,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder_a: Encoder,
    pub encoder_b: Option<Encoder>,
    pub head: Head,
}

pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    ModelParams::init(config, seed)
}

impl ModelParams {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = seeding::rng(seed, tags::INIT, 0);
        let encoder_a = Encoder::new(&mut store, "encoder_a", &config.encoder, &mut rng)?;
        let encoder_b = if config.shared_encoder {
            None
        } else {
            Some(Encoder::new(&mut store, "encoder_b", &config.encoder, &mut rng)?)
        };
        let head = Head::new(&mut store, config, &mut rng);
        let model = ModelParams {
            config: config.clone(),
            store,
            encoder_a,
            encoder_b,
            head,
        };
        model.check_widths()?;
        Ok(model)
    }

    /// Rebuilds a model around stored tensors; names and shapes must match `config`.
    pub fn from_store(config: &ModelConfig, store: ParamStore) -> Result<Self> {
        let mut model = Self::init(config, 0)?;
        if model.store.len() != store.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter tensors, found {}",
                model.store.len(),
                store.len()
            )));
        }
        for (want, got) in model.store.iter().zip(store.iter()) {
            if want.name != got.name || want.shape != got.shape {
                return Err(Error::Shape(format!(
                    "parameter `{}` {:?} does not match expected `{}` {:?}",
                    got.name, got.shape, want.name, want.shape
                )));
            }
        }
        model.store = store;
        Ok(model)
    }

    fn check_widths(&self) -> Result<()> {
        let d = self.encoder_a.dim() + self.second_encoder().dim();
        if d != self.head.input_dim() {
            return Err(Error::Shape(format!(
                "encoders produce {d} features, head expects {}",
                self.head.input_dim()
            )));
        }
        Ok(())
    }

    pub fn second_encoder(&self) -> &Encoder {
        self.encoder_b.as_ref().unwrap_or(&self.encoder_a)
    }

    pub fn embed_dim(&self) -> usize {
        self.encoder_a.dim()
    }

    /// Train/eval forward over a batch of `(first, second)` token pairs.
    ///
    /// `rng` drives dropout; with `None` no dropout is applied even in train
    /// mode. Batch-norm running statistics are left untouched; see
    /// [`ModelParams::update_running_stats`].
    pub fn forward_batch(
        &self,
        pairs: &[(&TokenSeq, &TokenSeq)],
        mode: Mode,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Vec<ScorePair>, BatchCache)> {
        if pairs.is_empty() {
            return Err(Error::Empty("batch has no pairs".into()));
        }
        let d = self.embed_dim();
        let enc_b = self.second_encoder();
        let mut x = Mat::zeros(pairs.len(), 2 * d);
        let mut first = Vec::with_capacity(pairs.len());
        let mut second = Vec::with_capacity(pairs.len());
        for (r, (a, b)) in pairs.iter().enumerate() {
            let (za, ca) = self.encoder_a.encode(&self.store, a, mode, rng.as_deref_mut())?;
            let (zb, cb) = enc_b.encode(&self.store, b, mode, rng.as_deref_mut())?;
            let row = x.row_mut(r);
            row[..d].copy_from_slice(&za);
            row[d..].copy_from_slice(&zb);
            first.push(ca);
            second.push(cb);
        }
        let (y, head) = self.head.forward(&self.store, x, mode, rng);
        if !y.all_finite() {
            return Err(Error::NonFinite {
                context: "head output scores".into(),
            });
        }
        let scores = (0..y.rows)
            .map(|r| ScorePair {
                score_first: y.data[2 * r],
                score_second: y.data[2 * r + 1],
            })
            .collect();
        Ok((
            scores,
            BatchCache {
                first,
                second,
                head,
            },
        ))
    }

    /// Accumulates gradients given `dL/d(score_first, score_second)` per pair.
    pub fn backward(&self, cache: &BatchCache, d_scores: &[(f64, f64)], grads: &mut Grads) {
        let dy = Mat {
            rows: d_scores.len(),
            cols: 2,
            data: d_scores.iter().flat_map(|&(a, b)| [a, b]).collect(),
        };
        let dx = self.head.backward(&self.store, &cache.head, &dy, grads);
        let d = self.embed_dim();
        let enc_b = self.second_encoder();
        for (r, (ca, cb)) in cache.first.iter().zip(&cache.second).enumerate() {
            let row = dx.row(r);
            if row[..d].iter().any(|&v| v != 0.0) {
                self.encoder_a.backward(&self.store, ca, &row[..d], grads);
            }
            if row[d..].iter().any(|&v| v != 0.0) {
                enc_b.backward(&self.store, cb, &row[d..], grads);
            }
        }
    }

    /// Folds a train-mode batch's statistics into the running estimates.
    pub fn update_running_stats(&mut self, cache: &BatchCache) {
        for (b, c) in self.head.blocks.iter().zip(&cache.head.blocks) {
            b.norm.update_running(&mut self.store, &c.norm);
        }
    }

    pub fn forward_pair(
        &self,
        a: &TokenSeq,
        b: &TokenSeq,
        mode: Mode,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ScorePair> {
        Ok(self.forward_batch(&[(a, b)], mode, rng)?.0[0])
    }

    pub fn encode_latent(&self, tokens: &TokenSeq) -> Result<Latent> {
        let a = self.encoder_a.encode(&self.store, tokens, Mode::Eval, None)?.0;
        let b = match &self.encoder_b {
            Some(e) => Some(e.encode(&self.store, tokens, Mode::Eval, None)?.0),
            None => None,
        };
        Ok(Latent { a, b })
    }

    /// Eval-mode scores for pairs of precomputed latents.
    pub fn score_latents(&self, pairs: &[(&Latent, &Latent)]) -> Result<Vec<ScorePair>> {
        let d = self.embed_dim();
        let mut x = Mat::zeros(pairs.len(), 2 * d);
        for (r, (a, b)) in pairs.iter().enumerate() {
            let row = x.row_mut(r);
            row[..d].copy_from_slice(a.first_slot());
            row[d..].copy_from_slice(b.second_slot());
        }
        let y = self.head.forward(&self.store, x, Mode::Eval, None).0;
        collect_scores(&y)
    }

    /// Splits the head's first linear layer into per-slot partial products so
    /// that scoring all pairs of a list costs one projection per passage.
    pub fn project(&self, latent: &Latent) -> Projected {
        let lin = self.head.first_linear();
        let w = self.store.data(lin.weight);
        let d = self.embed_dim();
        let part = |z: &[f64], off: usize| -> Vec<f64> {
            (0..lin.out_dim)
                .map(|o| {
                    let wr = &w[o * lin.in_dim + off..o * lin.in_dim + off + d];
                    wr.iter().zip(z).map(|(&w, x)| f64::from(w) * x).sum()
                })
                .collect()
        };
        Projected {
            first: part(latent.first_slot(), 0),
            second: part(latent.second_slot(), d),
        }
    }

    /// Eval-mode scores for `(first, second)` pairs of projected passages.
    pub fn score_projected(&self, pairs: &[(&Projected, &Projected)]) -> Result<Vec<ScorePair>> {
        let lin = self.head.first_linear();
        let bias = self.store.data(lin.bias);
        let width = lin.out_dim;
        let mut pre = Mat::zeros(pairs.len(), width);
        for (r, (a, b)) in pairs.iter().enumerate() {
            for (((dst, x), y), bb) in pre.row_mut(r).iter_mut().zip(&a.first).zip(&b.second).zip(bias) {
                *dst = x + y + f64::from(*bb);
            }
        }
        let y = match self.head.blocks.split_first() {
            None => pre,
            Some((first, rest)) => {
                let normed = first.norm.forward(&self.store, &pre, Mode::Eval).0;
                let mut h = first.act.forward(&self.store, &normed);
                for b in rest {
                    h = b.forward(&self.store, h, Mode::Eval, 0.0, None).0;
                }
                self.head.out.forward(&self.store, &h)
            }
        };
        collect_scores(&y)
    }

    /// Order-symmetrized comparator `M(a, b) = ½Δ(a,b) − ½Δ(b,a)`.
    pub fn symmetrized_margin(&self, a: &TokenSeq, b: &TokenSeq) -> Result<f64> {
        let la = self.encode_latent(a)?;
        let lb = self.encode_latent(b)?;
        let s = self.score_latents(&[(&la, &lb), (&lb, &la)])?;
        Ok(margin_from_scores(s[0], s[1]))
    }
}

/// Symmetrized margin from the `(a, b)` and `(b, a)` score pairs.
pub fn margin_from_scores(ab: ScorePair, ba: ScorePair) -> f64 {
    0.5 * ab.diff() - 0.5 * ba.diff()
}

fn collect_scores(y: &Mat) -> Result<Vec<ScorePair>> {
    if !y.all_finite() {
        return Err(Error::NonFinite {
            context: "head output scores".into(),
        });
    }
    Ok((0..y.rows)
        .map(|r| ScorePair {
            score_first: y.data[2 * r],
            score_second: y.data[2 * r + 1],
        })
        .collect())
}
