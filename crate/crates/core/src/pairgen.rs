//! Contextual pivot grouping and labeled pair enumeration.
//!
//! Passages are only ever compared inside their own context group. A pair
//! `(first, second)` carries label `+1` when `first` has the higher ground-truth
//! score and `-1` when `second` does; equal scores never produce a pair.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::corpus::{Corpus, Passage};
use crate::error::{Error, Result};
use crate::seeding::{self, fnv1a64, tags};

#[derive(Debug, Clone, PartialEq)]
pub struct ContextGroup<'a> {
    pub context_id: &'a str,
    pub passages: Vec<&'a Passage>,
}

impl ContextGroup<'_> {
    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }
}

/// One group per distinct context id, sorted by context id.
pub fn group_by_context(corpus: &Corpus) -> Vec<ContextGroup<'_>> {
    let mut groups: BTreeMap<&str, Vec<&Passage>> = BTreeMap::new();
    for p in corpus.passages() {
        groups.entry(p.context_id.as_str()).or_default().push(p);
    }
    groups
        .into_iter()
        .map(|(context_id, passages)| ContextGroup {
            context_id,
            passages,
        })
        .collect()
}

/// Ground-truth ranking label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    /// `first` ranks higher.
    FirstHigher,
    /// `second` ranks higher.
    SecondHigher,
}

impl Label {
    /// Label for scores `(a, b)`; `None` on ties.
    pub fn from_scores(a: f64, b: f64) -> Option<Label> {
        if a > b {
            Some(Label::FirstHigher)
        } else if b > a {
            Some(Label::SecondHigher)
        } else {
            None
        }
    }

    pub fn sign(self) -> f64 {
        match self {
            Label::FirstHigher => 1.0,
            Label::SecondHigher => -1.0,
        }
    }

    pub fn flipped(self) -> Label {
        match self {
            Label::FirstHigher => Label::SecondHigher,
            Label::SecondHigher => Label::FirstHigher,
        }
    }
}

impl Serialize for Label {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_i8(self.sign() as i8)
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match i64::deserialize(d)? {
            1 => Ok(Label::FirstHigher),
            -1 => Ok(Label::SecondHigher),
            other => Err(serde::de::Error::custom(format!(
                "label must be 1 or -1, got {other}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassagePair {
    pub first: String,
    pub second: String,
    pub label: Label,
}

impl PassagePair {
    pub fn swapped(&self) -> PassagePair {
        PassagePair {
            first: self.second.clone(),
            second: self.first.clone(),
            label: self.label.flipped(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairOrder {
    AsEnumerated,
    /// Each pair's slots are swapped with probability 1/2.
    Randomized,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PairPolicy {
    pub canonical_order: PairOrder,
    pub max_pairs_per_group: Option<usize>,
    pub seed: u64,
}

impl Default for PairPolicy {
    fn default() -> Self {
        PairPolicy {
            canonical_order: PairOrder::Randomized,
            max_pairs_per_group: None,
            seed: 42,
        }
    }
}

impl PairPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.max_pairs_per_group == Some(0) {
            return Err(Error::Config("max_pairs_per_group must be positive".into()));
        }
        Ok(())
    }
}

/// All labeled pairs of a group, one per unordered pair with distinct scores.
pub fn enumerate_pairs(group: &ContextGroup<'_>, policy: &PairPolicy) -> Vec<PassagePair> {
    let ps = &group.passages;
    let mut raw: Vec<(usize, usize, Label)> = Vec::new();
    for i in 0..ps.len() {
        for j in i + 1..ps.len() {
            if let Some(label) = Label::from_scores(ps[i].score, ps[j].score) {
                raw.push((i, j, label));
            }
        }
    }
    let group_key = fnv1a64(group.context_id.as_bytes());
    if let Some(cap) = policy.max_pairs_per_group {
        if raw.len() > cap {
            let mut rng = seeding::rng(policy.seed, tags::PAIR_CAP, group_key);
            let mut keep = index::sample(&mut rng, raw.len(), cap).into_vec();
            keep.sort_unstable();
            raw = keep.into_iter().map(|k| raw[k]).collect();
        }
    }
    let mut flip_rng = seeding::rng(policy.seed, tags::PAIR_FLIP, group_key);
    raw.into_iter()
        .map(|(i, j, label)| {
            let flip = policy.canonical_order == PairOrder::Randomized && flip_rng.gen::<bool>();
            let (a, b, l) = if flip { (j, i, label.flipped()) } else { (i, j, label) };
            PassagePair {
                first: ps[a].id.clone(),
                second: ps[b].id.clone(),
                label: l,
            }
        })
        .collect()
}

/// Every group's pairs, merged in context order and shuffled under the seed.
pub fn pair_stream(corpus: &Corpus, policy: &PairPolicy) -> Vec<PassagePair> {
    let groups = group_by_context(corpus);
    let per_group: Vec<Vec<PassagePair>> = groups
        .par_iter()
        .map(|g| enumerate_pairs(g, policy))
        .collect();
    let mut all: Vec<PassagePair> = per_group.into_iter().flatten().collect();
    all.shuffle(&mut seeding::rng(policy.seed, tags::PAIR_SHUFFLE, 0));
    all
}

/// Writes pairs as JSONL shards of at most `shard_size` lines each.
pub fn write_pair_shards(
    pairs: &[PassagePair],
    dir: &Path,
    shard_size: usize,
) -> Result<Vec<PathBuf>> {
    if shard_size == 0 {
        return Err(Error::Config("shard_size must be positive".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for (k, chunk) in pairs.chunks(shard_size).enumerate() {
        let path = dir.join(format!("pairs-{k:05}.jsonl"));
        write_pairs(chunk, &path)?;
        paths.push(path);
    }
    Ok(paths)
}

pub fn write_pairs(pairs: &[PassagePair], path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for p in pairs {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_pairs(path: &Path) -> Result<Vec<PassagePair>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}
