//! Minimal dense-network machinery with hand-written reverse passes.
//!
//! Parameters live in a flat [`ParamStore`] of named `f32` tensors; layers are
//! lightweight descriptors holding [`ParamId`]s into the store. Activations and
//! gradients are carried in `f64`, which keeps finite-difference checks
//! meaningful while checkpoints stay 32-bit.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub type ParamId = usize;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    /// Running statistics are stored but never receive gradients.
    pub trainable: bool,
    /// Gradients for this tensor are accumulated per row (embedding tables).
    pub row_sparse: bool,
}

impl Param {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Width of one row (last dimension).
    pub fn row_width(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        data: Vec<f32>,
        trainable: bool,
        row_sparse: bool,
    ) -> ParamId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.params.push(Param {
            name: name.into(),
            shape,
            data,
            trainable,
            row_sparse,
        });
        self.params.len() - 1
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id]
    }

    pub fn data(&self, id: ParamId) -> &[f32] {
        &self.params[id].data
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn num_trainable_scalars(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(Param::len)
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.data.iter().all(|v| v.is_finite()))
    }
}

/// Gradient storage for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub enum GradBuf {
    Dense(Vec<f64>),
    Rows {
        width: usize,
        rows: BTreeMap<usize, Vec<f64>>,
    },
    Frozen,
}

/// Gradients aligned slot-for-slot with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    bufs: Vec<GradBuf>,
}

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        let bufs = store
            .iter()
            .map(|p| {
                if !p.trainable {
                    GradBuf::Frozen
                } else if p.row_sparse {
                    GradBuf::Rows {
                        width: p.row_width(),
                        rows: BTreeMap::new(),
                    }
                } else {
                    GradBuf::Dense(vec![0.0; p.len()])
                }
            })
            .collect();
        Grads { bufs }
    }

    pub fn len(&self) -> usize {
        self.bufs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bufs.is_empty()
    }

    pub fn buf(&self, id: ParamId) -> &GradBuf {
        &self.bufs[id]
    }

    pub fn dense_mut(&mut self, id: ParamId) -> &mut [f64] {
        match &mut self.bufs[id] {
            GradBuf::Dense(v) => v,
            other => panic!("parameter {id} is not dense: {other:?}"),
        }
    }

    pub fn row_mut(&mut self, id: ParamId, row: usize) -> &mut [f64] {
        match &mut self.bufs[id] {
            GradBuf::Rows { width, rows } => {
                let w = *width;
                rows.entry(row).or_insert_with(|| vec![0.0; w])
            }
            other => panic!("parameter {id} is not row-sparse: {other:?}"),
        }
    }

    /// Gradient of one flat coordinate (zero for untouched sparse rows).
    pub fn coord(&self, id: ParamId, index: usize) -> f64 {
        match &self.bufs[id] {
            GradBuf::Dense(v) => v[index],
            GradBuf::Rows { width, rows } => rows
                .get(&(index / width))
                .map_or(0.0, |r| r[index % width]),
            GradBuf::Frozen => 0.0,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.bufs.iter().all(|b| match b {
            GradBuf::Dense(v) => v.iter().all(|x| x.is_finite()),
            GradBuf::Rows { rows, .. } => rows.values().flatten().all(|x| x.is_finite()),
            GradBuf::Frozen => true,
        })
    }

    /// Largest absolute gradient coordinate.
    pub fn max_abs(&self) -> f64 {
        self.bufs
            .iter()
            .map(|b| match b {
                GradBuf::Dense(v) => v.iter().fold(0.0f64, |m, x| m.max(x.abs())),
                GradBuf::Rows { rows, .. } => rows
                    .values()
                    .flatten()
                    .fold(0.0f64, |m, x| m.max(x.abs())),
                GradBuf::Frozen => 0.0,
            })
            .fold(0.0, f64::max)
    }

    pub fn name_of_first_non_finite<'a>(&self, store: &'a ParamStore) -> Option<&'a str> {
        self.bufs.iter().enumerate().find_map(|(i, b)| {
            let finite = match b {
                GradBuf::Dense(v) => v.iter().all(|x| x.is_finite()),
                GradBuf::Rows { rows, .. } => rows.values().flatten().all(|x| x.is_finite()),
                GradBuf::Frozen => true,
            };
            (!finite).then(|| store.get(i).name.as_str())
        })
    }
}

/// Row-major `f64` matrix used for activations.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Mat {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// `len` values drawn uniformly from `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn uniform_fan_in(rng: &mut ChaCha8Rng, fan_in: usize, len: usize) -> Vec<f32> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    (0..len)
        .map(|_| rng.gen_range(-bound..bound) as f32)
        .collect()
}

/// Fully connected layer, weight stored `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            vec![out_dim, in_dim],
            uniform_fan_in(rng, in_dim, in_dim * out_dim),
            true,
            false,
        );
        let bias = store.add(
            format!("{name}.bias"),
            vec![out_dim],
            vec![0.0; out_dim],
            true,
            false,
        );
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Mat) -> Mat {
        assert_eq!(x.cols, self.in_dim, "linear input width");
        let w = store.data(self.weight);
        let b = store.data(self.bias);
        let mut y = Mat::zeros(x.rows, self.out_dim);
        for r in 0..x.rows {
            let xr = x.row(r);
            let yr = y.row_mut(r);
            for (o, out) in yr.iter_mut().enumerate() {
                let wr = &w[o * self.in_dim..(o + 1) * self.in_dim];
                let mut acc = f64::from(b[o]);
                for (xi, wi) in xr.iter().zip(wr) {
                    acc += xi * f64::from(*wi);
                }
                *out = acc;
            }
        }
        y
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(&self, store: &ParamStore, x: &Mat, dy: &Mat, grads: &mut Grads) -> Mat {
        let w = store.data(self.weight);
        let mut dx = Mat::zeros(x.rows, self.in_dim);
        {
            let dw = grads.dense_mut(self.weight);
            for r in 0..x.rows {
                let xr = x.row(r);
                for (o, g) in dy.row(r).iter().enumerate() {
                    if *g == 0.0 {
                        continue;
                    }
                    let dwr = &mut dw[o * self.in_dim..(o + 1) * self.in_dim];
                    for (d, xi) in dwr.iter_mut().zip(xr) {
                        *d += g * xi;
                    }
                }
            }
        }
        {
            let db = grads.dense_mut(self.bias);
            for r in 0..dy.rows {
                for (d, g) in db.iter_mut().zip(dy.row(r)) {
                    *d += g;
                }
            }
        }
        for r in 0..x.rows {
            let dxr = dx.row_mut(r);
            for (o, g) in dy.row(r).iter().enumerate() {
                if *g == 0.0 {
                    continue;
                }
                let wr = &w[o * self.in_dim..(o + 1) * self.in_dim];
                for (d, wi) in dxr.iter_mut().zip(wr) {
                    *d += g * f64::from(*wi);
                }
            }
        }
        dx
    }
}

/// Batch normalization over the rows of a matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub dim: usize,
    pub eps: f64,
    pub momentum: f64,
}

#[derive(Debug, Clone)]
pub struct BatchNormCache {
    xhat: Mat,
    inv_std: Vec<f64>,
    /// Batch statistics (mean, unbiased variance) for the running update.
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
    train: bool,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, eps: f64, momentum: f64) -> Self {
        let gamma = store.add(format!("{name}.gamma"), vec![dim], vec![1.0; dim], true, false);
        let beta = store.add(format!("{name}.beta"), vec![dim], vec![0.0; dim], true, false);
        let running_mean = store.add(
            format!("{name}.running_mean"),
            vec![dim],
            vec![0.0; dim],
            false,
            false,
        );
        let running_var = store.add(
            format!("{name}.running_var"),
            vec![dim],
            vec![1.0; dim],
            false,
            false,
        );
        BatchNorm {
            gamma,
            beta,
            running_mean,
            running_var,
            dim,
            eps,
            momentum,
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Mat, mode: Mode) -> (Mat, BatchNormCache) {
        let n = x.rows;
        let d = self.dim;
        let gamma = store.data(self.gamma);
        let beta = store.data(self.beta);
        let (mean, var, train) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; d];
                for r in 0..n {
                    for (m, v) in mean.iter_mut().zip(x.row(r)) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut var = vec![0.0; d];
                for r in 0..n {
                    for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= n as f64);
                (mean, var, true)
            }
            Mode::Eval => (
                store.data(self.running_mean).iter().map(|&v| f64::from(v)).collect(),
                store.data(self.running_var).iter().map(|&v| f64::from(v)).collect(),
                false,
            ),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut xhat = Mat::zeros(n, d);
        let mut y = Mat::zeros(n, d);
        for r in 0..n {
            for c in 0..d {
                let h = (x.data[r * d + c] - mean[c]) * inv_std[c];
                xhat.data[r * d + c] = h;
                y.data[r * d + c] = f64::from(gamma[c]) * h + f64::from(beta[c]);
            }
        }
        let batch_var = if train && n > 1 {
            var.iter().map(|v| v * n as f64 / (n as f64 - 1.0)).collect()
        } else {
            var
        };
        (
            y,
            BatchNormCache {
                xhat,
                inv_std,
                batch_mean: mean,
                batch_var,
                train,
            },
        )
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &BatchNormCache,
        dy: &Mat,
        grads: &mut Grads,
    ) -> Mat {
        let n = dy.rows;
        let d = self.dim;
        let gamma = store.data(self.gamma);
        {
            let dg = grads.dense_mut(self.gamma);
            for r in 0..n {
                for c in 0..d {
                    dg[c] += dy.data[r * d + c] * cache.xhat.data[r * d + c];
                }
            }
        }
        {
            let db = grads.dense_mut(self.beta);
            for r in 0..n {
                for c in 0..d {
                    db[c] += dy.data[r * d + c];
                }
            }
        }
        let mut dx = Mat::zeros(n, d);
        if !cache.train {
            for r in 0..n {
                for c in 0..d {
                    dx.data[r * d + c] = dy.data[r * d + c] * f64::from(gamma[c]) * cache.inv_std[c];
                }
            }
            return dx;
        }
        let nf = n as f64;
        for c in 0..d {
            let g = f64::from(gamma[c]);
            let mut sum_dxhat = 0.0;
            let mut sum_dxhat_xhat = 0.0;
            for r in 0..n {
                let dxhat = dy.data[r * d + c] * g;
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * cache.xhat.data[r * d + c];
            }
            for r in 0..n {
                let dxhat = dy.data[r * d + c] * g;
                let xh = cache.xhat.data[r * d + c];
                dx.data[r * d + c] =
                    cache.inv_std[c] / nf * (nf * dxhat - sum_dxhat - xh * sum_dxhat_xhat);
            }
        }
        dx
    }

    /// Exponential running-statistics update from a train-mode cache.
    pub fn update_running(&self, store: &mut ParamStore, cache: &BatchNormCache) {
        if !cache.train {
            return;
        }
        let m = self.momentum;
        for (r, b) in store
            .get_mut(self.running_mean)
            .data
            .iter_mut()
            .zip(&cache.batch_mean)
        {
            *r = ((1.0 - m) * f64::from(*r) + m * b) as f32;
        }
        for (r, b) in store
            .get_mut(self.running_var)
            .data
            .iter_mut()
            .zip(&cache.batch_var)
        {
            *r = ((1.0 - m) * f64::from(*r) + m * b) as f32;
        }
    }
}

/// Parametric rectifier with one learned slope for the whole layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PRelu {
    pub slope: ParamId,
}

impl PRelu {
    pub fn new(store: &mut ParamStore, name: &str, init: f32) -> Self {
        PRelu {
            slope: store.add(format!("{name}.slope"), vec![1], vec![init], true, false),
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Mat) -> Mat {
        let a = f64::from(store.data(self.slope)[0]);
        Mat {
            rows: x.rows,
            cols: x.cols,
            data: x.data.iter().map(|&v| if v > 0.0 { v } else { a * v }).collect(),
        }
    }

    pub fn backward(&self, store: &ParamStore, x: &Mat, dy: &Mat, grads: &mut Grads) -> Mat {
        let a = f64::from(store.data(self.slope)[0]);
        let mut da = 0.0;
        let data = x
            .data
            .iter()
            .zip(&dy.data)
            .map(|(&v, &g)| {
                if v > 0.0 {
                    g
                } else {
                    da += g * v;
                    a * g
                }
            })
            .collect();
        grads.dense_mut(self.slope)[0] += da;
        Mat {
            rows: x.rows,
            cols: x.cols,
            data,
        }
    }
}

/// Inverted-dropout mask: each entry is 0 or `1/(1-rate)`.
pub fn dropout_mask(rng: &mut ChaCha8Rng, len: usize, rate: f64) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect()
}

pub fn apply_mask(x: &mut Mat, mask: &[f64]) {
    x.data.iter_mut().zip(mask).for_each(|(v, m)| *v *= m);
}

/// Linear → batch norm → parametric rectifier → dropout.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseBlock {
    pub linear: Linear,
    pub norm: BatchNorm,
    pub act: PRelu,
}

#[derive(Debug, Clone)]
pub struct DenseBlockCache {
    input: Mat,
    pub norm: BatchNormCache,
    act_in: Mat,
    mask: Option<Vec<f64>>,
}

impl DenseBlockCache {
    /// Which rectifier inputs were positive, row-major.
    pub fn rectifier_pattern(&self) -> Vec<bool> {
        self.act_in.data.iter().map(|&v| v > 0.0).collect()
    }
}

impl DenseBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        norm: &NormSettings,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let linear = Linear::new(store, &format!("{name}.linear"), in_dim, out_dim, rng);
        let bn = BatchNorm::new(store, &format!("{name}.norm"), out_dim, norm.eps, norm.momentum);
        let act = PRelu::new(store, &format!("{name}.act"), norm.prelu_init);
        DenseBlock {
            linear,
            norm: bn,
            act,
        }
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        x: Mat,
        mode: Mode,
        dropout_rate: f64,
        rng: Option<&mut ChaCha8Rng>,
    ) -> (Mat, DenseBlockCache) {
        let pre = self.linear.forward(store, &x);
        let (normed, norm_cache) = self.norm.forward(store, &pre, mode);
        let mut out = self.act.forward(store, &normed);
        let mask = match (mode, rng) {
            (Mode::Train, Some(rng)) if dropout_rate > 0.0 => {
                let m = dropout_mask(rng, out.data.len(), dropout_rate);
                apply_mask(&mut out, &m);
                Some(m)
            }
            _ => None,
        };
        (
            out,
            DenseBlockCache {
                input: x,
                norm: norm_cache,
                act_in: normed,
                mask,
            },
        )
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &DenseBlockCache,
        mut dy: Mat,
        grads: &mut Grads,
    ) -> Mat {
        if let Some(m) = &cache.mask {
            apply_mask(&mut dy, m);
        }
        let d_normed = self.act.backward(store, &cache.act_in, &dy, grads);
        let d_pre = self.norm.backward(store, &cache.norm, &d_normed, grads);
        self.linear.backward(store, &cache.input, &d_pre, grads)
    }
}

/// Batch-norm and rectifier settings shared by the dense heads.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormSettings {
    pub eps: f64,
    pub momentum: f64,
    pub prelu_init: f32,
}

/// Row-wise layer normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    xhat: Mat,
    inv_std: Vec<f64>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), vec![dim], vec![1.0; dim], true, false);
        let beta = store.add(format!("{name}.beta"), vec![dim], vec![0.0; dim], true, false);
        LayerNorm { gamma, beta, dim }
    }

    pub fn forward(&self, store: &ParamStore, x: &Mat) -> (Mat, LayerNormCache) {
        let d = self.dim;
        let gamma = store.data(self.gamma);
        let beta = store.data(self.beta);
        let mut xhat = Mat::zeros(x.rows, d);
        let mut y = Mat::zeros(x.rows, d);
        let mut inv_std = Vec::with_capacity(x.rows);
        for r in 0..x.rows {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat.data[r * d + c] = h;
                y.data[r * d + c] = f64::from(gamma[c]) * h + f64::from(beta[c]);
            }
        }
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &LayerNormCache,
        dy: &Mat,
        grads: &mut Grads,
    ) -> Mat {
        let d = self.dim;
        let gamma = store.data(self.gamma);
        {
            let dg = grads.dense_mut(self.gamma);
            for r in 0..dy.rows {
                for c in 0..d {
                    dg[c] += dy.data[r * d + c] * cache.xhat.data[r * d + c];
                }
            }
        }
        {
            let db = grads.dense_mut(self.beta);
            for r in 0..dy.rows {
                for c in 0..d {
                    db[c] += dy.data[r * d + c];
                }
            }
        }
        let mut dx = Mat::zeros(dy.rows, d);
        let df = d as f64;
        for r in 0..dy.rows {
            let mut sum = 0.0;
            let mut sum_x = 0.0;
            for c in 0..d {
                let g = dy.data[r * d + c] * f64::from(gamma[c]);
                sum += g;
                sum_x += g * cache.xhat.data[r * d + c];
            }
            for c in 0..d {
                let g = dy.data[r * d + c] * f64::from(gamma[c]);
                dx.data[r * d + c] = cache.inv_std[r] / df
                    * (df * g - sum - cache.xhat.data[r * d + c] * sum_x);
            }
        }
        dx
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Checks that a matrix is finite, naming the layer otherwise.
pub fn ensure_finite(m: &Mat, context: &str) -> Result<()> {
    if m.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            context: context.to_string(),
        })
    }
}
