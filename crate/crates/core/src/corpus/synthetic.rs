//! Planted-lexicon corpus generator.
//!
//! Each passage gets a class in `1..=5`. Its text mixes filler words with a
//! fixed number of quality-lexicon words; the share of positive lexicon words
//! is `(class - 1) / 4`. A `noise_rate` fraction of tokens is then replaced by
//! words drawn uniformly from the whole vocabulary, which blurs neighbouring
//! classes into each other.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Corpus, Passage};
use crate::error::{Error, Result};
use crate::seeding::{self, tags};

pub const NUM_CLASSES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PassagesPerContext {
    Fixed(usize),
    /// Inclusive range, drawn uniformly per context.
    Range(usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub num_contexts: usize,
    pub passages_per_context: PassagesPerContext,
    pub class_probabilities: [f64; NUM_CLASSES],
    pub vocab_size: usize,
    pub quality_lexicon_size: usize,
    pub noise_rate: f64,
    pub seed: u64,
    /// Filler words per passage.
    pub filler_tokens: usize,
    /// Quality-lexicon words per passage; a multiple of 4 keeps the mixing exact.
    pub lexicon_tokens: usize,
    /// When set, timestamps increase with the class inside every context.
    pub temporal: bool,
    /// When set, every class gets exactly a fifth of the passages and
    /// `class_probabilities` is ignored.
    pub balanced: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_contexts: 20,
            passages_per_context: PassagesPerContext::Fixed(10),
            class_probabilities: [0.2; NUM_CLASSES],
            vocab_size: 200,
            quality_lexicon_size: 20,
            noise_rate: 0.0,
            seed: 42,
            filler_tokens: 12,
            lexicon_tokens: 8,
            temporal: false,
            balanced: false,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_contexts == 0 {
            return bad("num_contexts must be positive".into());
        }
        match self.passages_per_context {
            PassagesPerContext::Fixed(0) => return bad("passages_per_context must be positive".into()),
            PassagesPerContext::Range(lo, hi) if lo == 0 || lo > hi => {
                return bad(format!("invalid passages_per_context range [{lo}, {hi}]"))
            }
            _ => {}
        }
        if self.class_probabilities.iter().any(|p| !(*p >= 0.0)) {
            return bad("class probabilities must be non-negative".into());
        }
        let sum: f64 = self.class_probabilities.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return bad(format!("class probabilities sum to {sum}, expected 1"));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return bad(format!("noise_rate {} outside [0, 1]", self.noise_rate));
        }
        if self.vocab_size == 0 || self.quality_lexicon_size == 0 {
            return bad("vocab_size and quality_lexicon_size must be positive".into());
        }
        if self.filler_tokens + self.lexicon_tokens == 0 {
            return bad("passages need at least one token".into());
        }
        Ok(())
    }

    /// Total number of vocabulary words (fillers plus both lexicons).
    pub fn total_vocab(&self) -> usize {
        self.vocab_size + 2 * self.quality_lexicon_size
    }
}

fn word(spec: &SyntheticSpec, index: usize) -> String {
    if index < spec.vocab_size {
        format!("w{index}")
    } else if index < spec.vocab_size + spec.quality_lexicon_size {
        format!("pos{}", index - spec.vocab_size)
    } else {
        format!("neg{}", index - spec.vocab_size - spec.quality_lexicon_size)
    }
}

fn sample_class(rng: &mut impl Rng, probs: &[f64; NUM_CLASSES]) -> u32 {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i as u32 + 1;
        }
    }
    // rounding slack: last class with non-zero mass
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(0) as u32 + 1
}

/// Number of positive lexicon words for a class.
pub fn positive_count(class: u32, lexicon_tokens: usize) -> usize {
    ((lexicon_tokens as f64) * f64::from(class - 1) / 4.0).round() as usize
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = seeding::rng(spec.seed, tags::SYNTHETIC, 0);
    let total_vocab = spec.total_vocab();
    let sizes: Vec<usize> = (0..spec.num_contexts)
        .map(|_| match spec.passages_per_context {
            PassagesPerContext::Fixed(n) => n,
            PassagesPerContext::Range(lo, hi) => rng.gen_range(lo..=hi),
        })
        .collect();
    let total: usize = sizes.iter().sum();
    let mut fixed_classes = if spec.balanced {
        if total % NUM_CLASSES != 0 {
            return Err(Error::Config(format!(
                "balanced generation needs a multiple of {NUM_CLASSES} passages, got {total}"
            )));
        }
        let mut classes: Vec<u32> = (0..total).map(|k| (k % NUM_CLASSES) as u32 + 1).collect();
        classes.shuffle(&mut rng);
        Some(classes.into_iter())
    } else {
        None
    };
    let mut passages = Vec::with_capacity(total);
    for (c, &n) in sizes.iter().enumerate() {
        let context_id = format!("ctx{c:05}");
        let mut group = Vec::with_capacity(n);
        for i in 0..n {
            let class = match fixed_classes.as_mut() {
                Some(it) => it.next().expect("one class per passage"),
                None => sample_class(&mut rng, &spec.class_probabilities),
            };
            let positives = positive_count(class, spec.lexicon_tokens);
            let mut tokens: Vec<usize> = Vec::with_capacity(spec.filler_tokens + spec.lexicon_tokens);
            for _ in 0..spec.filler_tokens {
                tokens.push(rng.gen_range(0..spec.vocab_size));
            }
            for k in 0..spec.lexicon_tokens {
                let j = rng.gen_range(0..spec.quality_lexicon_size);
                let base = if k < positives {
                    spec.vocab_size
                } else {
                    spec.vocab_size + spec.quality_lexicon_size
                };
                tokens.push(base + j);
            }
            tokens.shuffle(&mut rng);
            for t in &mut tokens {
                if rng.gen::<f64>() < spec.noise_rate {
                    *t = rng.gen_range(0..total_vocab);
                }
            }
            let text = tokens
                .iter()
                .map(|&t| word(spec, t))
                .collect::<Vec<_>>()
                .join(" ");
            let tiebreak: u64 = rng.gen();
            group.push((class, tiebreak, Passage::new(format!("{context_id}-{i:05}"), &context_id, text, f64::from(class)).with_label(class)));
        }
        if spec.temporal {
            let mut order: Vec<usize> = (0..group.len()).collect();
            order.sort_by_key(|&i| (group[i].0, group[i].1));
            for (rank, &i) in order.iter().enumerate() {
                group[i].2.timestamp = Some(1_600_000_000 + 3_600 * rank as i64);
            }
        }
        passages.extend(group.into_iter().map(|(_, _, p)| p));
    }
    Corpus::new(passages)
}
