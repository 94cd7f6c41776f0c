//! Text encoders producing a fixed-width latent vector per passage.
//!
//! Tokens are lowercased whitespace-separated words with surrounding
//! punctuation stripped, hashed with FNV-1a into `[1, hash_dims)`. Id 0 is
//! reserved for the null token that stands in for empty text.
//!
//! Two encoder kinds share that token pipeline:
//! * `mean_pool`: a learned embedding table averaged over the sequence;
//! * `tiny_attention`: learned positions plus pre-norm self-attention blocks,
//!   mean-pooled after the last block.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    apply_mask, dropout_mask, gelu, gelu_grad, Grads, LayerNorm, LayerNormCache, Linear, Mat,
    Mode, ParamId, ParamStore,
};
use crate::seeding::fnv1a64;

pub const NULL_TOKEN: u32 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    MeanPool,
    TinyAttention,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub hash_dims: usize,
    pub embed_dim: usize,
    pub max_tokens: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    /// Dropout inside attention blocks (train mode only).
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            kind: EncoderKind::MeanPool,
            hash_dims: 1 << 18,
            embed_dim: 64,
            max_tokens: 128,
            layers: 2,
            heads: 2,
            ff_dim: 128,
            dropout: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.hash_dims < 2 {
            return bad("hash_dims must be at least 2");
        }
        if self.embed_dim == 0 || self.max_tokens == 0 {
            return bad("embed_dim and max_tokens must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("encoder dropout must lie in [0, 1)");
        }
        if self.kind == EncoderKind::TinyAttention {
            if self.heads == 0 || self.embed_dim % self.heads != 0 {
                return bad("embed_dim must be a positive multiple of heads");
            }
            if self.layers == 0 || self.ff_dim == 0 {
                return bad("layers and ff_dim must be positive");
            }
        }
        Ok(())
    }

    pub fn tokenizer(&self) -> Tokenizer {
        Tokenizer {
            hash_dims: self.hash_dims,
            max_tokens: self.max_tokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSeq {
    ids: Vec<u32>,
}

impl TokenSeq {
    pub fn new(ids: Vec<u32>) -> Self {
        TokenSeq { ids }
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tokenizer {
    pub hash_dims: usize,
    pub max_tokens: usize,
}

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '\u{2018}' | '\u{2019}' | '\u{201C}' | '\u{201D}' | '\u{2013}' | '\u{2014}'
                | '\u{2026}' | '\u{00AB}' | '\u{00BB}' | '\u{00BF}' | '\u{00A1}'
        )
}

/// Lowercased, punctuation-trimmed words of `text`.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace()
        .map(|w| w.trim_matches(is_punct).to_lowercase())
        .filter(|w| !w.is_empty())
}

pub fn hash_token(word: &str, hash_dims: usize) -> u32 {
    let buckets = (hash_dims - 1) as u64;
    (1 + fnv1a64(word.as_bytes()) % buckets) as u32
}

impl Tokenizer {
    pub fn tokenize(&self, text: &str) -> TokenSeq {
        let mut ids: Vec<u32> = words(text)
            .take(self.max_tokens)
            .map(|w| hash_token(&w, self.hash_dims))
            .collect();
        if ids.is_empty() {
            ids.push(NULL_TOKEN);
        }
        TokenSeq { ids }
    }
}

pub fn tokenize(text: &str, max_tokens: usize, hash_dims: usize) -> TokenSeq {
    Tokenizer {
        hash_dims,
        max_tokens,
    }
    .tokenize(text)
}

fn uniform_unit_variance(rng: &mut ChaCha8Rng, len: usize) -> Vec<f32> {
    use rand::Rng;
    let b = 3f64.sqrt();
    (0..len).map(|_| rng.gen_range(-b..b) as f32).collect()
}

#[derive(Debug, Clone, PartialEq)]
struct AttentionBlock {
    ln1: LayerNorm,
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

/// Encoder descriptor; its parameters live in a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub embed: ParamId,
    positions: Option<ParamId>,
    blocks: Vec<AttentionBlock>,
}

#[derive(Debug, Clone)]
struct BlockCache {
    ln1: LayerNormCache,
    normed: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    /// softmax probabilities per head, `n x n`
    probs: Vec<Mat>,
    prob_masks: Vec<Option<Vec<f64>>>,
    context: Mat,
    out_mask: Option<Vec<f64>>,
    ln2: LayerNormCache,
    normed2: Mat,
    ff_pre: Mat,
    ff_act: Mat,
    ff_mask: Option<Vec<f64>>,
}

/// Forward state needed by [`Encoder::backward`].
#[derive(Debug, Clone)]
pub struct EncodeCache {
    ids: Vec<u32>,
    blocks: Vec<BlockCache>,
}

impl Encoder {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        config: &EncoderConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let embed = store.add(
            format!("{prefix}.embed"),
            vec![config.hash_dims, d],
            uniform_unit_variance(rng, config.hash_dims * d),
            true,
            true,
        );
        let (positions, blocks) = match config.kind {
            EncoderKind::MeanPool => (None, Vec::new()),
            EncoderKind::TinyAttention => {
                let pos = store.add(
                    format!("{prefix}.positions"),
                    vec![config.max_tokens, d],
                    uniform_unit_variance(rng, config.max_tokens * d),
                    true,
                    false,
                );
                let blocks = (0..config.layers)
                    .map(|l| {
                        let p = format!("{prefix}.block{l}");
                        AttentionBlock {
                            ln1: LayerNorm::new(store, &format!("{p}.ln1"), d),
                            query: Linear::new(store, &format!("{p}.query"), d, d, rng),
                            key: Linear::new(store, &format!("{p}.key"), d, d, rng),
                            value: Linear::new(store, &format!("{p}.value"), d, d, rng),
                            out: Linear::new(store, &format!("{p}.out"), d, d, rng),
                            ln2: LayerNorm::new(store, &format!("{p}.ln2"), d),
                            ff1: Linear::new(store, &format!("{p}.ff1"), d, config.ff_dim, rng),
                            ff2: Linear::new(store, &format!("{p}.ff2"), config.ff_dim, d, rng),
                        }
                    })
                    .collect();
                (Some(pos), blocks)
            }
        };
        Ok(Encoder {
            config: config.clone(),
            embed,
            positions,
            blocks,
        })
    }

    pub fn dim(&self) -> usize {
        self.config.embed_dim
    }

    fn check(&self, store: &ParamStore, tokens: &TokenSeq) -> Result<()> {
        let table = store.get(self.embed);
        if table.shape != [self.config.hash_dims, self.config.embed_dim] {
            return Err(Error::Shape(format!(
                "embedding table {:?} does not match config ({}, {})",
                table.shape, self.config.hash_dims, self.config.embed_dim
            )));
        }
        if tokens.is_empty() {
            return Err(Error::Shape("empty token sequence".into()));
        }
        if let Some(bad) = tokens.ids.iter().find(|&&t| t as usize >= self.config.hash_dims) {
            return Err(Error::Shape(format!(
                "token id {bad} outside [0, {})",
                self.config.hash_dims
            )));
        }
        if self.positions.is_some() && tokens.len() > self.config.max_tokens {
            return Err(Error::Shape(format!(
                "sequence of {} tokens exceeds max_tokens {}",
                tokens.len(),
                self.config.max_tokens
            )));
        }
        Ok(())
    }

    /// Encodes one sequence; `rng` drives attention dropout in train mode.
    pub fn encode(
        &self,
        store: &ParamStore,
        tokens: &TokenSeq,
        mode: Mode,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Vec<f64>, EncodeCache)> {
        self.check(store, tokens)?;
        let d = self.dim();
        let n = tokens.len();
        let table = store.data(self.embed);
        let mut h = Mat::zeros(n, d);
        for (r, &id) in tokens.ids.iter().enumerate() {
            let row = &table[id as usize * d..(id as usize + 1) * d];
            for (dst, src) in h.row_mut(r).iter_mut().zip(row) {
                *dst = f64::from(*src);
            }
        }
        let mut caches = Vec::with_capacity(self.blocks.len());
        if let Some(pos) = self.positions {
            let pos = store.data(pos);
            for r in 0..n {
                for (dst, src) in h.row_mut(r).iter_mut().zip(&pos[r * d..(r + 1) * d]) {
                    *dst += f64::from(*src);
                }
            }
            let rate = match mode {
                Mode::Train => self.config.dropout,
                Mode::Eval => 0.0,
            };
            for block in &self.blocks {
                let (next, cache) = self.block_forward(block, store, h, rate, rng.as_deref_mut());
                h = next;
                caches.push(cache);
            }
        }
        let mut z = vec![0.0; d];
        for r in 0..n {
            for (acc, v) in z.iter_mut().zip(h.row(r)) {
                *acc += v;
            }
        }
        z.iter_mut().for_each(|v| *v /= n as f64);
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("encoder output ({:?})", self.config.kind),
            });
        }
        Ok((
            z,
            EncodeCache {
                ids: tokens.ids.clone(),
                blocks: caches,
            },
        ))
    }

    fn block_forward(
        &self,
        b: &AttentionBlock,
        store: &ParamStore,
        h: Mat,
        rate: f64,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> (Mat, BlockCache) {
        let n = h.rows;
        let d = self.dim();
        let heads = self.config.heads;
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut mask = |len: usize| -> Option<Vec<f64>> {
            match rng.as_deref_mut() {
                Some(r) if rate > 0.0 => Some(dropout_mask(r, len, rate)),
                _ => None,
            }
        };

        let (normed, ln1) = b.ln1.forward(store, &h);
        let q = b.query.forward(store, &normed);
        let k = b.key.forward(store, &normed);
        let v = b.value.forward(store, &normed);
        let mut context = Mat::zeros(n, d);
        let mut probs = Vec::with_capacity(heads);
        let mut prob_masks = Vec::with_capacity(heads);
        for hh in 0..heads {
            let off = hh * hd;
            let mut p = Mat::zeros(n, n);
            for i in 0..n {
                let qi = &q.row(i)[off..off + hd];
                let row = p.row_mut(i);
                for (j, s) in row.iter_mut().enumerate() {
                    let kj = &k.row(j)[off..off + hd];
                    *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for s in row.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                row.iter_mut().for_each(|s| *s /= sum);
            }
            let m = mask(n * n);
            let mut used = p.clone();
            if let Some(m) = &m {
                apply_mask(&mut used, m);
            }
            for i in 0..n {
                for j in 0..n {
                    let a = used.data[i * n + j];
                    if a == 0.0 {
                        continue;
                    }
                    let vj = &v.row(j)[off..off + hd];
                    for (c, vv) in context.row_mut(i)[off..off + hd].iter_mut().zip(vj) {
                        *c += a * vv;
                    }
                }
            }
            probs.push(p);
            prob_masks.push(m);
        }
        let mut attn_out = b.out.forward(store, &context);
        let out_mask = mask(n * d);
        if let Some(m) = &out_mask {
            apply_mask(&mut attn_out, m);
        }
        let mut h1 = h;
        h1.data.iter_mut().zip(&attn_out.data).for_each(|(a, b)| *a += b);

        let (normed2, ln2) = b.ln2.forward(store, &h1);
        let ff_pre = b.ff1.forward(store, &normed2);
        let ff_act = Mat {
            rows: ff_pre.rows,
            cols: ff_pre.cols,
            data: ff_pre.data.iter().map(|&x| gelu(x)).collect(),
        };
        let mut ff_out = b.ff2.forward(store, &ff_act);
        let ff_mask = mask(n * d);
        if let Some(m) = &ff_mask {
            apply_mask(&mut ff_out, m);
        }
        let mut h2 = h1;
        h2.data.iter_mut().zip(&ff_out.data).for_each(|(a, b)| *a += b);
        (
            h2,
            BlockCache {
                ln1,
                normed,
                q,
                k,
                v,
                probs,
                prob_masks,
                context,
                out_mask,
                ln2,
                normed2,
                ff_pre,
                ff_act,
                ff_mask,
            },
        )
    }

    /// Accumulates parameter gradients given `dL/dz`.
    pub fn backward(&self, store: &ParamStore, cache: &EncodeCache, dz: &[f64], grads: &mut Grads) {
        let d = self.dim();
        let n = cache.ids.len();
        let mut dh = Mat::zeros(n, d);
        for r in 0..n {
            for (g, v) in dh.row_mut(r).iter_mut().zip(dz) {
                *g = v / n as f64;
            }
        }
        for (block, bc) in self.blocks.iter().zip(&cache.blocks).rev() {
            dh = self.block_backward(block, store, bc, dh, grads);
        }
        if let Some(pos) = self.positions {
            let gp = grads.dense_mut(pos);
            for r in 0..n {
                for (g, v) in gp[r * d..(r + 1) * d].iter_mut().zip(dh.row(r)) {
                    *g += v;
                }
            }
        }
        for (r, &id) in cache.ids.iter().enumerate() {
            let row = grads.row_mut(self.embed, id as usize);
            for (g, v) in row.iter_mut().zip(dh.row(r)) {
                *g += v;
            }
        }
    }

    fn block_backward(
        &self,
        b: &AttentionBlock,
        store: &ParamStore,
        c: &BlockCache,
        dh2: Mat,
        grads: &mut Grads,
    ) -> Mat {
        let n = dh2.rows;
        let d = self.dim();
        let heads = self.config.heads;
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();

        // feed-forward branch
        let mut d_ff_out = dh2.clone();
        if let Some(m) = &c.ff_mask {
            apply_mask(&mut d_ff_out, m);
        }
        let d_act = b.ff2.backward(store, &c.ff_act, &d_ff_out, grads);
        let d_pre = Mat {
            rows: d_act.rows,
            cols: d_act.cols,
            data: d_act
                .data
                .iter()
                .zip(&c.ff_pre.data)
                .map(|(g, &x)| g * gelu_grad(x))
                .collect(),
        };
        let d_normed2 = b.ff1.backward(store, &c.normed2, &d_pre, grads);
        let mut dh1 = dh2;
        let from_ln2 = b.ln2.backward(store, &c.ln2, &d_normed2, grads);
        dh1.data.iter_mut().zip(&from_ln2.data).for_each(|(a, g)| *a += g);

        // attention branch
        let mut d_attn = dh1.clone();
        if let Some(m) = &c.out_mask {
            apply_mask(&mut d_attn, m);
        }
        let d_context = b.out.backward(store, &c.context, &d_attn, grads);
        let mut dq = Mat::zeros(n, d);
        let mut dk = Mat::zeros(n, d);
        let mut dv = Mat::zeros(n, d);
        for hh in 0..heads {
            let off = hh * hd;
            let p = &c.probs[hh];
            let mut used = p.clone();
            if let Some(m) = &c.prob_masks[hh] {
                apply_mask(&mut used, m);
            }
            let mut d_used = Mat::zeros(n, n);
            for i in 0..n {
                let dci = &d_context.row(i)[off..off + hd];
                for j in 0..n {
                    let vj = &c.v.row(j)[off..off + hd];
                    d_used.data[i * n + j] = dci.iter().zip(vj).map(|(a, b)| a * b).sum();
                    let a = used.data[i * n + j];
                    if a != 0.0 {
                        for (g, x) in dv.row_mut(j)[off..off + hd].iter_mut().zip(dci) {
                            *g += a * x;
                        }
                    }
                }
            }
            if let Some(m) = &c.prob_masks[hh] {
                apply_mask(&mut d_used, m);
            }
            for i in 0..n {
                let pi = p.row(i);
                let dpi = d_used.row(i);
                let dot: f64 = pi.iter().zip(dpi).map(|(a, b)| a * b).sum();
                for j in 0..n {
                    let ds = pi[j] * (dpi[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj: Vec<f64> = c.k.row(j)[off..off + hd].to_vec();
                    let qi: Vec<f64> = c.q.row(i)[off..off + hd].to_vec();
                    for (g, x) in dq.row_mut(i)[off..off + hd].iter_mut().zip(&kj) {
                        *g += ds * x;
                    }
                    for (g, x) in dk.row_mut(j)[off..off + hd].iter_mut().zip(&qi) {
                        *g += ds * x;
                    }
                }
            }
        }
        let mut d_normed = b.query.backward(store, &c.normed, &dq, grads);
        for part in [
            b.key.backward(store, &c.normed, &dk, grads),
            b.value.backward(store, &c.normed, &dv, grads),
        ] {
            d_normed.data.iter_mut().zip(&part.data).for_each(|(a, g)| *a += g);
        }
        let from_ln1 = b.ln1.backward(store, &c.ln1, &d_normed, grads);
        let mut dh = dh1;
        dh.data.iter_mut().zip(&from_ln1.data).for_each(|(a, g)| *a += g);
        dh
    }
}
