//! Softmax classifier over the same encoder, and the ranker-vs-classifier
//! comparison on a balanced test set.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{split_corpus, Corpus, Passage, SplitStrategy};
use crate::encoder::{EncodeCache, Encoder, EncoderConfig, TokenSeq};
use crate::error::{Error, Result};
use crate::evalrank::{pair_accuracy, rank_passages, rank_to_classes};
use crate::nn::{DenseBlock, DenseBlockCache, Grads, Linear, Mat, Mode, ParamStore};
use crate::pairgen::{pair_stream, PairOrder, PairPolicy};
use crate::rankhead::{HeadConfig, ModelConfig};
use crate::seeding::{self, tags};
use crate::training::{adamw_update, train_loop, LossConfig, OptimConfig, OptimState, PairAccuracy, PairSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub encoder: EncoderConfig,
    pub classes: usize,
    /// Dropout and normalization settings of the hidden block.
    pub head: HeadConfig,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            encoder: EncoderConfig::default(),
            classes: 5,
            head: HeadConfig::default(),
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.classes < 2 {
            return Err(Error::Config("a classifier needs at least two classes".into()));
        }
        if self.encoder.embed_dim < 2 {
            return Err(Error::Config("classifier needs embed_dim >= 2".into()));
        }
        if !(0.0..1.0).contains(&self.head.dropout_rate) {
            return Err(Error::Config("dropout_rate must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Encoder, one dense block `d -> d/2`, and a linear layer to class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    pub config: ClassifierConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub hidden: DenseBlock,
    pub out: Linear,
}

#[derive(Debug, Clone)]
pub struct ClassifierCache {
    encoded: Vec<EncodeCache>,
    hidden: DenseBlockCache,
    out_input: Mat,
}

impl ClassifierCache {
    pub fn rectifier_pattern(&self) -> Vec<bool> {
        self.hidden.rectifier_pattern()
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

impl ClassifierParams {
    pub fn init(config: &ClassifierConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = seeding::rng(seed, tags::CLASSIFIER, 0);
        let encoder = Encoder::new(&mut store, "encoder", &config.encoder, &mut rng)?;
        let d = config.encoder.embed_dim;
        let hidden = DenseBlock::new(&mut store, "classifier.block0", d, d / 2, &config.head.norm_settings(), &mut rng);
        let out = Linear::new(&mut store, "classifier.out", d / 2, config.classes, &mut rng);
        Ok(ClassifierParams {
            config: config.clone(),
            store,
            encoder,
            hidden,
            out,
        })
    }

    /// Class logits for a batch. `rng` drives dropout; `None` disables it.
    pub fn forward_batch(
        &self,
        batch: &[&TokenSeq],
        mode: Mode,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Mat, ClassifierCache)> {
        if batch.is_empty() {
            return Err(Error::Empty("batch has no passages".into()));
        }
        let d = self.encoder.dim();
        let mut x = Mat::zeros(batch.len(), d);
        let mut encoded = Vec::with_capacity(batch.len());
        for (r, t) in batch.iter().enumerate() {
            let (z, c) = self.encoder.encode(&self.store, t, mode, rng.as_deref_mut())?;
            x.row_mut(r).copy_from_slice(&z);
            encoded.push(c);
        }
        let (h, hidden) = self.hidden.forward(&self.store, x, mode, self.config.head.dropout_rate, rng);
        let logits = self.out.forward(&self.store, &h);
        if !logits.all_finite() {
            return Err(Error::NonFinite {
                context: "classifier logits".into(),
            });
        }
        Ok((
            logits,
            ClassifierCache {
                encoded,
                hidden,
                out_input: h,
            },
        ))
    }

    pub fn backward(&self, cache: &ClassifierCache, d_logits: &Mat, grads: &mut Grads) {
        let dh = self.out.backward(&self.store, &cache.out_input, d_logits, grads);
        let dx = self.hidden.backward(&self.store, &cache.hidden, dh, grads);
        for (r, c) in cache.encoded.iter().enumerate() {
            self.encoder.backward(&self.store, c, dx.row(r), grads);
        }
    }

    pub fn update_running_stats(&mut self, cache: &ClassifierCache) {
        self.hidden.norm.update_running(&mut self.store, &cache.hidden.norm);
    }

    /// Eval-mode label (1-based) and class probabilities.
    pub fn classify_tokens(&self, tokens: &TokenSeq) -> Result<(u32, Vec<f64>)> {
        let (logits, _) = self.forward_batch(&[tokens], Mode::Eval, None)?;
        let probs = softmax(logits.row(0));
        Ok((argmax(&probs) as u32 + 1, probs))
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn classify(params: &ClassifierParams, passage: &Passage) -> Result<(u32, Vec<f64>)> {
    params.classify_tokens(&params.config.encoder.tokenizer().tokenize(&passage.text))
}

/// Mean cross-entropy over the batch and its gradients (train mode).
pub fn classifier_gradients(
    params: &ClassifierParams,
    batch: &[(&TokenSeq, u32)],
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, Grads, ClassifierCache)> {
    let seqs: Vec<&TokenSeq> = batch.iter().map(|(t, _)| *t).collect();
    let (logits, cache) = params.forward_batch(&seqs, Mode::Train, rng)?;
    let n = batch.len() as f64;
    let c = params.config.classes;
    let mut d = Mat::zeros(batch.len(), c);
    let mut loss = 0.0;
    for (r, (_, label)) in batch.iter().enumerate() {
        let target = *label as usize - 1;
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        loss += lse - row[target];
        for (k, g) in d.row_mut(r).iter_mut().enumerate() {
            let p = (row[k] - lse).exp();
            *g = (p - if k == target { 1.0 } else { 0.0 }) / n;
        }
    }
    let mut grads = Grads::zeros_like(&params.store);
    params.backward(&cache, &d, &mut grads);
    Ok((loss / n, grads, cache))
}

#[derive(Debug, Clone)]
pub struct ClassifierOutcome {
    pub params: ClassifierParams,
    pub state: OptimState,
    /// `(step, mean loss since previous entry)`.
    pub log: Vec<(u64, f64)>,
    pub warnings: Vec<String>,
    pub diverged: Option<String>,
}

fn class_of(p: &Passage, classes: usize) -> Result<u32> {
    match p.class() {
        Some(c) if c >= 1 && c as usize <= classes => Ok(c),
        _ => Err(Error::Config(format!("passage `{}` has no class in 1..={classes}", p.id))),
    }
}

/// Trains the classifier with AdamW on shuffled mini-batches of passages.
pub fn train_classifier(corpus: &Corpus, config: &ClassifierConfig, optim: &OptimConfig) -> Result<ClassifierOutcome> {
    optim.validate()?;
    let mut params = ClassifierParams::init(config, optim.seed)?;
    let mut state = OptimState::new(&params.store);
    let tokenizer = config.encoder.tokenizer();
    let examples: Vec<(TokenSeq, u32)> = corpus
        .passages()
        .par_iter()
        .map(|p| Ok((tokenizer.tokenize(&p.text), class_of(p, config.classes)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut warnings = Vec::new();
    for c in 1..=config.classes as u32 {
        if !examples.iter().any(|(_, l)| *l == c) {
            warnings.push(format!("class {c} absent from training data"));
        }
    }
    let mut log = Vec::new();
    let mut diverged = None;
    if optim.max_steps > 0 && examples.is_empty() {
        return Err(Error::Empty("no training passages".into()));
    }
    let bs = optim.batch_size.min(examples.len()).max(1);
    let per_epoch = (examples.len() / bs).max(1) as u64;
    let mut order: Vec<usize> = Vec::new();
    let mut epoch = u64::MAX;
    let (mut loss_sum, mut loss_steps) = (0.0, 0u64);
    while state.step < optim.max_steps {
        let step = state.step;
        let e = step / per_epoch;
        if e != epoch {
            epoch = e;
            order = (0..examples.len()).collect();
            order.shuffle(&mut seeding::rng(optim.seed, tags::EPOCH_SHUFFLE, e));
        }
        let off = ((step % per_epoch) as usize) * bs;
        let batch: Vec<(&TokenSeq, u32)> = order[off..off + bs].iter().map(|&i| (&examples[i].0, examples[i].1)).collect();
        let mut rng = seeding::rng(optim.seed, tags::DROPOUT, step);
        let (loss, grads, cache) = match classifier_gradients(&params, &batch, Some(&mut rng)) {
            Ok(x) => x,
            Err(Error::NonFinite { context }) => {
                diverged = Some(format!("step {}: non-finite {context}", step + 1));
                break;
            }
            Err(e) => return Err(e),
        };
        if !loss.is_finite() || !grads.all_finite() {
            diverged = Some(format!("step {}: non-finite loss or gradient", step + 1));
            break;
        }
        match adamw_update(&mut state, &mut params.store, &grads, optim) {
            Ok(()) => {}
            Err(Error::NonFinite { context }) => {
                diverged = Some(format!("step {}: non-finite {context}", step + 1));
                break;
            }
            Err(e) => return Err(e),
        }
        params.update_running_stats(&cache);
        loss_sum += loss;
        loss_steps += 1;
        if state.step % optim.probe_interval == 0 || state.step == optim.max_steps {
            log.push((state.step, loss_sum / loss_steps as f64));
            loss_sum = 0.0;
            loss_steps = 0;
        }
    }
    Ok(ClassifierOutcome {
        params,
        state,
        log,
        warnings,
        diverged,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierMetrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    /// Mean one-vs-rest ROC AUC over classes present in the test set.
    pub macro_auc: f64,
}

/// Area under the ROC curve via the rank statistic (ties averaged).
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if positive[k] {
                rank_sum += avg;
            }
        }
        i = j + 1;
    }
    let np = n_pos as f64;
    Some((rank_sum - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

/// Accuracy, macro F1 and macro one-vs-rest AUC.
pub fn classifier_metrics(truth: &[u32], predicted: &[u32], probs: &[Vec<f64>], classes: usize) -> ClassifierMetrics {
    let n = truth.len().max(1) as f64;
    let accuracy = truth.iter().zip(predicted).filter(|(a, b)| a == b).count() as f64 / n;
    let mut f1s = Vec::new();
    let mut aucs = Vec::new();
    for c in 1..=classes as u32 {
        let tp = truth.iter().zip(predicted).filter(|(t, p)| **t == c && **p == c).count() as f64;
        let fp = truth.iter().zip(predicted).filter(|(t, p)| **t != c && **p == c).count() as f64;
        let fneg = truth.iter().zip(predicted).filter(|(t, p)| **t == c && **p != c).count() as f64;
        if tp + fneg > 0.0 {
            f1s.push(if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fneg) });
        }
        let scores: Vec<f64> = probs.iter().map(|p| p[c as usize - 1]).collect();
        let pos: Vec<bool> = truth.iter().map(|&t| t == c).collect();
        if let Some(a) = roc_auc(&scores, &pos) {
            aucs.push(a);
        }
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    ClassifierMetrics {
        accuracy,
        macro_f1: mean(&f1s),
        macro_auc: mean(&aucs),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompareConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    /// Budget and optimizer shared by both learners.
    pub optim: OptimConfig,
    /// Optional learning-rate override for the classifier.
    pub classifier_learning_rate: Option<f64>,
    /// When non-empty, the classifier learning rate is picked from these by
    /// accuracy on a random 20% validation split of the training set.
    pub classifier_lr_grid: Vec<f64>,
    pub pairs: PairPolicy,
    pub classes: usize,
}

impl Default for CompareConfig {
    fn default() -> Self {
        CompareConfig {
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            classifier_learning_rate: None,
            classifier_lr_grid: Vec::new(),
            pairs: PairPolicy::default(),
            classes: 5,
        }
    }
}

impl CompareConfig {
    pub fn classifier_config(&self) -> ClassifierConfig {
        ClassifierConfig {
            encoder: self.model.encoder.clone(),
            classes: self.classes,
            head: self.model.head.clone(),
        }
    }

    pub fn classifier_optim(&self) -> OptimConfig {
        OptimConfig {
            learning_rate: self.classifier_learning_rate.unwrap_or(self.optim.learning_rate),
            ..self.optim.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub ranker: u64,
    pub classifier: u64,
    pub pairs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub ranker_accuracy: f64,
    pub classifier_accuracy: f64,
    /// `ranker_accuracy - classifier_accuracy`.
    pub gap: f64,
    pub classifier_macro_f1: f64,
    pub classifier_macro_auc: f64,
    pub ranker_pair_accuracy: Option<PairAccuracy>,
    pub train_distribution: Vec<f64>,
    pub test_distribution: Vec<f64>,
    pub seeds: Seeds,
    pub configs: CompareConfig,
    pub classifier_config: ClassifierConfig,
    pub classifier_learning_rate: f64,
    /// `(learning rate, validation accuracy)` per grid entry.
    pub classifier_lr_search: Vec<(f64, f64)>,
    pub encoders_match: bool,
    pub train_pairs: usize,
    pub diverged: Vec<String>,
    pub warnings: Vec<String>,
}

/// Classifier accuracy on a labeled corpus.
pub fn accuracy_on(params: &ClassifierParams, corpus: &Corpus, classes: usize) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Empty("no passages to classify".into()));
    }
    let hits = corpus
        .passages()
        .par_iter()
        .map(|p| Ok(usize::from(classify(params, p)?.0 == class_of(p, classes)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / corpus.len() as f64)
}

fn check_balanced(test: &Corpus, classes: usize) -> Result<Vec<u32>> {
    let truth = test
        .passages()
        .iter()
        .map(|p| class_of(p, classes))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| Error::Unbalanced(e.to_string()))?;
    let mut counts = vec![0usize; classes];
    for &t in &truth {
        counts[t as usize - 1] += 1;
    }
    if counts.iter().any(|&c| c != counts[0]) || counts[0] == 0 {
        return Err(Error::Unbalanced(format!("class counts {counts:?}")));
    }
    Ok(truth)
}

/// Trains the ranker and the classifier on `train` and scores both on the
/// balanced `test` set. The ranker ranks the whole test set as one list and
/// converts ranks to classes with equal segments.
pub fn head_to_head(train: &Corpus, test: &Corpus, cfg: &CompareConfig) -> Result<CompareReport> {
    let truth = check_balanced(test, cfg.classes)?;
    let tokenizer = cfg.model.encoder.tokenizer();

    let pairs = pair_stream(train, &cfg.pairs);
    let train_set = PairSet::new(train, &pairs, &tokenizer)?;
    let ranked_out = train_loop(&train_set, None, &cfg.model, &cfg.loss, &cfg.optim)?;
    let ranker = ranked_out.model;
    let all: Vec<&Passage> = test.passages().iter().collect();
    let ranked = rank_passages(&ranker, "test", &all)?;
    let labels = rank_to_classes(&ranked.ids, cfg.classes, None)?;
    let index = test.index();
    let ranker_hits = ranked
        .ids
        .iter()
        .zip(&labels)
        .filter(|(id, l)| truth[index[id.as_str()]] == **l)
        .count();
    let ranker_accuracy = ranker_hits as f64 / truth.len() as f64;
    let enumerated = PairPolicy {
        canonical_order: PairOrder::AsEnumerated,
        max_pairs_per_group: None,
        seed: 0,
    };
    let test_pairs = pair_stream(test, &enumerated);
    let ranker_pair_accuracy = if test_pairs.is_empty() {
        None
    } else {
        Some(pair_accuracy(&ranker, test, &test_pairs)?)
    };

    let ccfg = cfg.classifier_config();
    let mut coptim = cfg.classifier_optim();
    let mut lr_search = Vec::new();
    if !cfg.classifier_lr_grid.is_empty() {
        let (fit, val) = split_corpus(train, SplitStrategy::Random, 0.2, cfg.optim.seed)?;
        for &lr in &cfg.classifier_lr_grid {
            let o = OptimConfig {
                learning_rate: lr,
                ..coptim.clone()
            };
            let out = train_classifier(&fit, &ccfg, &o)?;
            let acc = if out.diverged.is_some() {
                0.0
            } else {
                accuracy_on(&out.params, &val, cfg.classes)?
            };
            lr_search.push((lr, acc));
        }
        let mut best = lr_search[0];
        for &(lr, acc) in &lr_search[1..] {
            if acc > best.1 || (acc == best.1 && lr < best.0) {
                best = (lr, acc);
            }
        }
        coptim.learning_rate = best.0;
    }
    let clf = train_classifier(train, &ccfg, &coptim)?;
    let predictions = test
        .passages()
        .par_iter()
        .map(|p| classify(&clf.params, p))
        .collect::<Result<Vec<_>>>()?;
    let predicted: Vec<u32> = predictions.iter().map(|(l, _)| *l).collect();
    let probs: Vec<Vec<f64>> = predictions.into_iter().map(|(_, p)| p).collect();
    let cm = classifier_metrics(&truth, &predicted, &probs, cfg.classes);

    let mut diverged = Vec::new();
    if let Some(d) = ranked_out.log.diverged {
        diverged.push(format!("ranker: {d}"));
    }
    if let Some(d) = clf.diverged {
        diverged.push(format!("classifier: {d}"));
    }
    Ok(CompareReport {
        ranker_accuracy,
        classifier_accuracy: cm.accuracy,
        gap: ranker_accuracy - cm.accuracy,
        classifier_macro_f1: cm.macro_f1,
        classifier_macro_auc: cm.macro_auc,
        ranker_pair_accuracy,
        train_distribution: train.class_distribution(cfg.classes as u32),
        test_distribution: test.class_distribution(cfg.classes as u32),
        seeds: Seeds {
            ranker: cfg.optim.seed,
            classifier: coptim.seed,
            pairs: cfg.pairs.seed,
        },
        encoders_match: ccfg.encoder == cfg.model.encoder,
        classifier_learning_rate: coptim.learning_rate,
        classifier_lr_search: lr_search,
        classifier_config: ccfg,
        configs: cfg.clone(),
        train_pairs: train_set.len(),
        diverged,
        warnings: clf.warnings,
    })
}
