//! Dataset model: passages grouped by a context id, graded by a real score.
//!
//! Corpora are read from and written to JSONL (one object per line) or CSV
//! with a header row. Both formats share the same field names:
//! `id`, `context`, `text`, `score`, and the optional `timestamp`,
//! `item_votes`, `parent_votes` and `label`.

mod synthetic;

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::{self, tags};

pub use synthetic::{generate_synthetic, PassagesPerContext, SyntheticSpec};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Passage {
    pub id: String,
    pub context_id: String,
    pub text: String,
    pub score: f64,
    pub timestamp: Option<i64>,
    /// (votes on the passage, votes on its parent item)
    pub raw_votes: Option<(u64, u64)>,
    /// Discrete class in `1..=C`, when known.
    pub label: Option<u32>,
}

impl Passage {
    pub fn new(
        id: impl Into<String>,
        context_id: impl Into<String>,
        text: impl Into<String>,
        score: f64,
    ) -> Self {
        Passage {
            id: id.into(),
            context_id: context_id.into(),
            text: text.into(),
            score,
            timestamp: None,
            raw_votes: None,
            label: None,
        }
    }

    pub fn with_timestamp(mut self, ts: i64) -> Self {
        self.timestamp = Some(ts);
        self
    }

    pub fn with_votes(mut self, item: u64, parent: u64) -> Self {
        self.raw_votes = Some((item, parent));
        self
    }

    pub fn with_label(mut self, label: u32) -> Self {
        self.label = Some(label);
        self
    }

    /// Class used by the classifier: the explicit label, else an integral score.
    pub fn class(&self) -> Option<u32> {
        self.label.or_else(|| {
            (self.score.fract() == 0.0 && self.score >= 1.0 && self.score <= u32::MAX as f64)
                .then_some(self.score as u32)
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    passages: Vec<Passage>,
    pub schema_version: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Jsonl,
    Csv,
}

impl Format {
    /// Guesses the format from a file extension, defaulting to JSONL.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => Format::Csv,
            _ => Format::Jsonl,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    id: Option<String>,
    context: Option<String>,
    text: Option<String>,
    score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    timestamp: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    item_votes: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    parent_votes: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<u32>,
}

impl Record {
    fn from_passage(p: &Passage) -> Self {
        Record {
            id: Some(p.id.clone()),
            context: Some(p.context_id.clone()),
            text: Some(p.text.clone()),
            score: Some(p.score),
            timestamp: p.timestamp,
            item_votes: p.raw_votes.map(|v| v.0),
            parent_votes: p.raw_votes.map(|v| v.1),
            label: p.label,
        }
    }

    fn into_passage(self, line: usize) -> Result<Passage> {
        let id = self.id.ok_or(Error::MissingField { line, field: "id" })?;
        let context_id = self.context.ok_or(Error::MissingField {
            line,
            field: "context",
        })?;
        let text = self.text.ok_or(Error::MissingField { line, field: "text" })?;
        let score = self.score.ok_or(Error::MissingField {
            line,
            field: "score",
        })?;
        if !score.is_finite() {
            return Err(Error::InvalidField {
                line,
                field: "score",
                message: "must be finite".into(),
            });
        }
        if text.trim().is_empty() {
            return Err(Error::InvalidField {
                line,
                field: "text",
                message: "empty after trimming whitespace".into(),
            });
        }
        let raw_votes = match (self.item_votes, self.parent_votes) {
            (Some(i), Some(p)) => Some((i, p)),
            (None, None) => None,
            (Some(_), None) => {
                return Err(Error::MissingField {
                    line,
                    field: "parent_votes",
                })
            }
            (None, Some(_)) => {
                return Err(Error::MissingField {
                    line,
                    field: "item_votes",
                })
            }
        };
        Ok(Passage {
            id,
            context_id,
            text,
            score,
            timestamp: self.timestamp,
            raw_votes,
            label: self.label,
        })
    }
}

impl Corpus {
    /// Builds a corpus, rejecting duplicate ids and invalid passages.
    pub fn new(passages: Vec<Passage>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(passages.len());
        for p in &passages {
            if !seen.insert(p.id.as_str()) {
                return Err(Error::DuplicateId(p.id.clone()));
            }
            if !p.score.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("score of passage `{}`", p.id),
                });
            }
            if p.text.trim().is_empty() {
                return Err(Error::Config(format!("passage `{}` has empty text", p.id)));
            }
        }
        Ok(Corpus {
            passages,
            schema_version: SCHEMA_VERSION,
        })
    }

    pub fn empty() -> Self {
        Corpus {
            passages: Vec::new(),
            schema_version: SCHEMA_VERSION,
        }
    }

    pub fn passages(&self) -> &[Passage] {
        &self.passages
    }

    pub fn into_passages(self) -> Vec<Passage> {
        self.passages
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Passage> {
        self.passages.iter().find(|p| p.id == id)
    }

    /// Map from passage id to index.
    pub fn index(&self) -> std::collections::HashMap<&str, usize> {
        self.passages
            .iter()
            .enumerate()
            .map(|(i, p)| (p.id.as_str(), i))
            .collect()
    }

    /// Class frequencies over `1..=classes` (passages without a class are skipped).
    pub fn class_distribution(&self, classes: u32) -> Vec<f64> {
        let mut counts = vec![0usize; classes as usize];
        let mut total = 0usize;
        for c in self.passages.iter().filter_map(Passage::class) {
            if (1..=classes).contains(&c) {
                counts[(c - 1) as usize] += 1;
                total += 1;
            }
        }
        counts
            .into_iter()
            .map(|n| if total == 0 { 0.0 } else { n as f64 / total as f64 })
            .collect()
    }
}

pub fn load_dataset(path: &Path, format: Format) -> Result<Corpus> {
    match format {
        Format::Jsonl => {
            let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
            read_jsonl(BufReader::new(file)).map_err(|e| match e {
                Error::Io { source, .. } => Error::io(path, source),
                other => other,
            })
        }
        Format::Csv => {
            let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
            read_csv(file)
        }
    }
}

pub fn read_jsonl(reader: impl BufRead) -> Result<Corpus> {
    let mut passages = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io("<reader>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        passages.push(rec.into_passage(line_no)?);
    }
    Corpus::new(passages)
}

pub fn read_csv(reader: impl std::io::Read) -> Result<Corpus> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    for field in ["id", "context", "text", "score"] {
        if col(field).is_none() {
            return Err(Error::MissingField { line: 1, field });
        }
    }
    let optional = |rec: &csv::StringRecord, name: &str| -> Option<String> {
        col(name)
            .and_then(|i| rec.get(i))
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string)
    };
    let mut passages = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        // header is line 1
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        let parse_num = |name: &'static str| -> Result<Option<f64>> {
            optional(&rec, name)
                .map(|s| {
                    s.parse::<f64>().map_err(|e| Error::InvalidField {
                        line,
                        field: name,
                        message: e.to_string(),
                    })
                })
                .transpose()
        };
        let parse_int = |name: &'static str| -> Result<Option<i64>> {
            optional(&rec, name)
                .map(|s| {
                    s.parse::<i64>().map_err(|e| Error::InvalidField {
                        line,
                        field: name,
                        message: e.to_string(),
                    })
                })
                .transpose()
        };
        let non_negative = |name: &'static str, v: Option<i64>| -> Result<Option<u64>> {
            v.map(|x| {
                u64::try_from(x).map_err(|_| Error::InvalidField {
                    line,
                    field: name,
                    message: "must be non-negative".into(),
                })
            })
            .transpose()
        };
        let record = Record {
            id: optional(&rec, "id"),
            context: optional(&rec, "context"),
            text: col("text").and_then(|i| rec.get(i)).map(str::to_string),
            score: parse_num("score")?,
            timestamp: parse_int("timestamp")?,
            item_votes: non_negative("item_votes", parse_int("item_votes")?)?,
            parent_votes: non_negative("parent_votes", parse_int("parent_votes")?)?,
            label: non_negative("label", parse_int("label")?)?
                .map(|v| v as u32),
        };
        passages.push(record.into_passage(line)?);
    }
    Corpus::new(passages)
}

pub fn save_dataset(corpus: &Corpus, path: &Path, format: Format) -> Result<()> {
    let bytes = match format {
        Format::Jsonl => to_jsonl(corpus)?,
        Format::Csv => to_csv(corpus)?,
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn to_jsonl(corpus: &Corpus) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for p in &corpus.passages {
        serde_json::to_writer(&mut out, &Record::from_passage(p))?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn to_csv(corpus: &Corpus) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "id",
        "context",
        "text",
        "score",
        "timestamp",
        "item_votes",
        "parent_votes",
        "label",
    ])?;
    let opt = |v: Option<String>| v.unwrap_or_default();
    for p in &corpus.passages {
        w.write_record([
            p.id.clone(),
            p.context_id.clone(),
            p.text.clone(),
            // `{:?}` keeps the shortest round-trip representation for f64
            format!("{:?}", p.score),
            opt(p.timestamp.map(|t| t.to_string())),
            opt(p.raw_votes.map(|v| v.0.to_string())),
            opt(p.raw_votes.map(|v| v.1.to_string())),
            opt(p.label.map(|l| l.to_string())),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv buffer>", e))?;
    w.into_inner()
        .map_err(|e| Error::io("<csv buffer>", e.into_error()))
}

/// Vote-normalized score: votes on the passage over (votes on its parent + 1).
pub fn normalized_vote_score(item_votes: u64, parent_votes: u64) -> f64 {
    item_votes as f64 / (parent_votes as f64 + 1.0)
}

/// Equal-width bin index in `1..=bins` over `[min, max]`.
pub fn equal_width_bin(score: f64, min: f64, max: f64, bins: u32) -> u32 {
    if max <= min {
        return 1;
    }
    let pos = ((score - min) / (max - min) * f64::from(bins)).floor();
    (pos.max(0.0) as u32 + 1).min(bins)
}

/// Replaces each score by its vote-normalized value and assigns the
/// equal-width histogram bin as the passage label.
pub fn normalize_and_bin(corpus: &Corpus, bins: u32) -> Result<Corpus> {
    if bins < 2 {
        return Err(Error::Config(format!("bins must be at least 2, got {bins}")));
    }
    let mut passages = corpus.passages.clone();
    for p in &mut passages {
        let (item, parent) = p.raw_votes.ok_or_else(|| Error::MissingVotes(p.id.clone()))?;
        p.score = normalized_vote_score(item, parent);
    }
    let (min, max) = passages
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            (lo.min(p.score), hi.max(p.score))
        });
    for p in &mut passages {
        p.label = Some(equal_width_bin(p.score, min, max, bins));
    }
    Ok(Corpus {
        passages,
        schema_version: corpus.schema_version,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitStrategy {
    Random,
    ByContext,
    Temporal,
}

fn split_count(n: usize, fraction: f64) -> usize {
    let k = (fraction * n as f64).round() as usize;
    if n >= 2 {
        k.clamp(1, n - 1)
    } else {
        k.min(n)
    }
}

/// Splits into (train, test). Both halves keep the original passage order.
pub fn split_corpus(
    corpus: &Corpus,
    strategy: SplitStrategy,
    test_fraction: f64,
    seed: u64,
) -> Result<(Corpus, Corpus)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!(
            "test_fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let n = corpus.len();
    let mut in_test = vec![false; n];
    match strategy {
        SplitStrategy::Random => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut seeding::rng(seed, tags::SPLIT, 0));
            for &i in order.iter().take(split_count(n, test_fraction)) {
                in_test[i] = true;
            }
        }
        SplitStrategy::ByContext => {
            let contexts: Vec<&str> = {
                let set: std::collections::BTreeSet<&str> =
                    corpus.passages.iter().map(|p| p.context_id.as_str()).collect();
                set.into_iter().collect()
            };
            let mut shuffled = contexts.clone();
            shuffled.shuffle(&mut seeding::rng(seed, tags::SPLIT, 1));
            let test_ctx: HashSet<&str> = shuffled
                .into_iter()
                .take(split_count(contexts.len(), test_fraction))
                .collect();
            for (i, p) in corpus.passages.iter().enumerate() {
                in_test[i] = test_ctx.contains(p.context_id.as_str());
            }
        }
        SplitStrategy::Temporal => {
            let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
            for (i, p) in corpus.passages.iter().enumerate() {
                if p.timestamp.is_none() {
                    return Err(Error::MissingTimestamp(p.id.clone()));
                }
                groups.entry(p.context_id.as_str()).or_default().push(i);
            }
            for members in groups.values_mut() {
                members.sort_by(|&a, &b| {
                    let (pa, pb) = (&corpus.passages[a], &corpus.passages[b]);
                    pa.timestamp.cmp(&pb.timestamp).then_with(|| pa.id.cmp(&pb.id))
                });
                let k = (test_fraction * members.len() as f64).round() as usize;
                for &i in &members[members.len() - k..] {
                    in_test[i] = true;
                }
            }
        }
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (p, t) in corpus.passages.iter().zip(in_test) {
        if t {
            test.push(p.clone());
        } else {
            train.push(p.clone());
        }
    }
    Ok((
        Corpus {
            passages: train,
            schema_version: corpus.schema_version,
        },
        Corpus {
            passages: test,
            schema_version: corpus.schema_version,
        },
    ))
}

/// Writes each passage to `w` as one JSONL line.
pub fn write_jsonl(corpus: &Corpus, mut w: impl Write) -> Result<()> {
    w.write_all(&to_jsonl(corpus)?)
        .map_err(|e| Error::io("<writer>", e))
}
