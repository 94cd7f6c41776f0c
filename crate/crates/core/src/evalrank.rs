//! List ranking by round-robin tournament, retrieval metrics, pair accuracy,
//! temporal consistency and rank-to-class conversion.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Passage};
use crate::encoder::TokenSeq;
use crate::error::{Error, Result};
use crate::pairgen::{group_by_context, pair_stream, ContextGroup, PairOrder, PairPolicy, PassagePair};
use crate::rankhead::{margin_from_scores, ModelParams};
use crate::training::{encode_all, set_accuracy, PairAccuracy, PairSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub context_id: String,
    /// Best first.
    pub ids: Vec<String>,
    /// Wins of each ranked item, aligned with `ids`.
    pub wins: Vec<u32>,
    /// Summed symmetrized margins, aligned with `ids`.
    pub margin_sums: Vec<f64>,
}

/// Copeland order from an antisymmetric margin matrix (`n x n`, row-major).
///
/// Items are sorted by wins (margin > 0) descending, then summed margin
/// descending, then id ascending. Returns indices best first together with
/// per-index wins and margin sums.
pub fn tournament_order(ids: &[&str], margins: &[f64]) -> (Vec<usize>, Vec<u32>, Vec<f64>) {
    let n = ids.len();
    assert_eq!(margins.len(), n * n, "margin matrix must be n x n");
    let mut wins = vec![0u32; n];
    let mut sums = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let m = margins[i * n + j];
                if m > 0.0 {
                    wins[i] += 1;
                }
                sums[i] += m;
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        wins[b]
            .cmp(&wins[a])
            .then_with(|| sums[b].partial_cmp(&sums[a]).unwrap_or(Ordering::Equal))
            .then_with(|| ids[a].cmp(ids[b]))
    });
    (order, wins, sums)
}

/// Symmetrized margins `M(i, j)` for all ordered pairs of `tokens`.
pub fn margin_matrix(model: &ModelParams, tokens: &[&TokenSeq]) -> Result<Vec<f64>> {
    let n = tokens.len();
    let latents = encode_all(model, tokens)?;
    let proj: Vec<_> = latents.iter().map(|l| model.project(l)).collect();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            if i + 1 >= n {
                return Ok(Vec::new());
            }
            let mut items = Vec::with_capacity(2 * (n - i - 1));
            for j in i + 1..n {
                items.push((&proj[i], &proj[j]));
                items.push((&proj[j], &proj[i]));
            }
            let s = model.score_projected(&items)?;
            Ok(s.chunks_exact(2).map(|c| margin_from_scores(c[0], c[1])).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut m = vec![0.0; n * n];
    for (i, row) in rows.iter().enumerate() {
        for (k, &v) in row.iter().enumerate() {
            let j = i + 1 + k;
            m[i * n + j] = v;
            m[j * n + i] = -v;
        }
    }
    Ok(m)
}

/// Ranks arbitrary passages by round-robin tournament.
pub fn rank_passages(model: &ModelParams, context_id: &str, passages: &[&Passage]) -> Result<RankedList> {
    if passages.is_empty() {
        return Err(Error::Empty(format!("context `{context_id}` has no passages")));
    }
    let tokenizer = model.config.encoder.tokenizer();
    let tokens: Vec<TokenSeq> = passages.par_iter().map(|p| tokenizer.tokenize(&p.text)).collect();
    let refs: Vec<&TokenSeq> = tokens.iter().collect();
    let margins = margin_matrix(model, &refs)?;
    let ids: Vec<&str> = passages.iter().map(|p| p.id.as_str()).collect();
    let (order, wins, sums) = tournament_order(&ids, &margins);
    Ok(RankedList {
        context_id: context_id.to_string(),
        ids: order.iter().map(|&i| ids[i].to_string()).collect(),
        wins: order.iter().map(|&i| wins[i]).collect(),
        margin_sums: order.iter().map(|&i| sums[i]).collect(),
    })
}

pub fn rank_list(model: &ModelParams, group: &ContextGroup<'_>) -> Result<RankedList> {
    rank_passages(model, group.context_id, &group.passages)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gain {
    /// `2^r - 1`
    Exponential,
    /// `r`
    Linear,
}

impl Gain {
    pub fn apply(self, r: f64) -> f64 {
        match self {
            Gain::Exponential => r.exp2() - 1.0,
            Gain::Linear => r,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    pub k: usize,
    pub gain: Gain,
    /// Number of top ground-truth items counted as relevant; defaults to `k`.
    pub relevant_top: Option<usize>,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            k: 10,
            gain: Gain::Exponential,
            relevant_top: None,
        }
    }
}

impl MetricsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.relevant_top == Some(0) {
            return Err(Error::Config("k and relevant_top must be at least 1".into()));
        }
        Ok(())
    }

    pub fn relevant_count(&self) -> usize {
        self.relevant_top.unwrap_or(self.k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ListMetrics {
    pub mrr: f64,
    pub ndcg: f64,
    pub map: f64,
}

/// MRR, NDCG and MAP at `k` for one ranked list.
///
/// `ids` and `truth` are in ranked order (best first). Relevant items are the
/// top `m` by ground truth, ties broken by ascending id. NDCG is 0 when the
/// ideal DCG is 0; MAP divides by `min(|relevant|, k)`.
pub fn list_metrics(ids: &[&str], truth: &[f64], cfg: &MetricsConfig) -> Result<ListMetrics> {
    cfg.validate()?;
    let n = ids.len();
    if n == 0 || truth.len() != n {
        return Err(Error::Empty("list metrics need a non-empty list with one truth score per item".into()));
    }
    let k = cfg.k.min(n);
    let mut by_truth: Vec<usize> = (0..n).collect();
    by_truth.sort_by(|&a, &b| {
        truth[b]
            .partial_cmp(&truth[a])
            .unwrap_or(Ordering::Equal)
            .then_with(|| ids[a].cmp(ids[b]))
    });
    let m = cfg.relevant_count().min(n);
    let mut relevant = vec![false; n];
    for &i in &by_truth[..m] {
        relevant[i] = true;
    }

    let discount = |pos: usize| ((pos + 2) as f64).log2();
    let dcg: f64 = (0..k).map(|i| cfg.gain.apply(truth[i]) / discount(i)).sum();
    let idcg: f64 = (0..k).map(|i| cfg.gain.apply(truth[by_truth[i]]) / discount(i)).sum();
    let ndcg = if idcg == 0.0 { 0.0 } else { dcg / idcg };

    let mrr = (0..k).find(|&i| relevant[i]).map_or(0.0, |i| 1.0 / (i + 1) as f64);

    let mut hits = 0usize;
    let mut precision_sum = 0.0;
    for (i, &rel) in relevant.iter().enumerate().take(k) {
        if rel {
            hits += 1;
            precision_sum += hits as f64 / (i + 1) as f64;
        }
    }
    let map = precision_sum / m.min(cfg.k) as f64;
    Ok(ListMetrics { mrr, ndcg, map })
}

/// Pair accuracy over explicit test pairs; tied ground-truth scores are rejected.
pub fn pair_accuracy(model: &ModelParams, corpus: &Corpus, pairs: &[PassagePair]) -> Result<PairAccuracy> {
    for p in pairs {
        let a = corpus.get(&p.first).ok_or_else(|| Error::UnknownPassage(p.first.clone()))?;
        let b = corpus.get(&p.second).ok_or_else(|| Error::UnknownPassage(p.second.clone()))?;
        if a.score == b.score {
            return Err(Error::TiedPair {
                first: p.first.clone(),
                second: p.second.clone(),
            });
        }
    }
    let set = PairSet::new(corpus, pairs, &model.config.encoder.tokenizer())?;
    set_accuracy(model, &set)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mrr: f64,
    pub ndcg: f64,
    pub map: f64,
    pub pair_accuracy_canonical: f64,
    pub pair_accuracy_symmetrized: f64,
    pub lists_evaluated: usize,
    /// Lists with fewer than two items or a single distinct score.
    pub lists_skipped: usize,
    pub pairs: usize,
    pub config: MetricsConfig,
}

fn evaluable(group: &ContextGroup<'_>) -> bool {
    group.len() >= 2 && group.passages.iter().any(|p| p.score != group.passages[0].score)
}

/// Ranks every context of `corpus` and averages list metrics; pair accuracy
/// covers all untied within-context pairs in enumeration order.
pub fn evaluate(model: &ModelParams, corpus: &Corpus, cfg: &MetricsConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    let groups = group_by_context(corpus);
    let kept: Vec<&ContextGroup<'_>> = groups.iter().filter(|g| evaluable(g)).collect();
    if kept.is_empty() {
        return Err(Error::Empty("no context has two or more distinctly scored passages".into()));
    }
    let per_list = kept
        .par_iter()
        .map(|g| {
            let ranked = rank_list(model, g)?;
            let ids: Vec<&str> = ranked.ids.iter().map(String::as_str).collect();
            let truth: Vec<f64> = ids
                .iter()
                .map(|id| g.passages.iter().find(|p| p.id == *id).expect("ranked id").score)
                .collect();
            list_metrics(&ids, &truth, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = per_list.len() as f64;
    let mean = |f: fn(&ListMetrics) -> f64| per_list.iter().map(f).sum::<f64>() / n;
    let policy = PairPolicy {
        canonical_order: PairOrder::AsEnumerated,
        max_pairs_per_group: None,
        seed: 0,
    };
    let pairs = pair_stream(corpus, &policy);
    let acc = pair_accuracy(model, corpus, &pairs)?;
    Ok(MetricsReport {
        mrr: mean(|m| m.mrr),
        ndcg: mean(|m| m.ndcg),
        map: mean(|m| m.map),
        pair_accuracy_canonical: acc.canonical,
        pair_accuracy_symmetrized: acc.symmetrized,
        lists_evaluated: per_list.len(),
        lists_skipped: groups.len() - per_list.len(),
        pairs: acc.pairs,
        config: cfg.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalReport {
    pub accuracy: f64,
    pub pairs: usize,
    pub contexts: usize,
    pub min_items: usize,
}

/// Passages of one context that enter the temporal comparison: sorted by
/// (timestamp, id), keeping only the earliest passage of each distinct score.
fn temporal_items<'a>(group: &ContextGroup<'a>) -> Result<Vec<&'a Passage>> {
    let mut items = group.passages.clone();
    for p in &items {
        if p.timestamp.is_none() {
            return Err(Error::MissingTimestamp(p.id.clone()));
        }
    }
    items.sort_by(|a, b| a.timestamp.cmp(&b.timestamp).then_with(|| a.id.cmp(&b.id)));
    let mut seen: Vec<f64> = Vec::new();
    items.retain(|p| {
        if seen.contains(&p.score) {
            false
        } else {
            seen.push(p.score);
            true
        }
    });
    Ok(items)
}

/// Fraction of within-context (earlier, later) pairs where the model ranks
/// the later passage higher. Pairs with equal timestamps are skipped.
pub fn temporal_consistency(model: &ModelParams, corpus: &Corpus, min_items: usize) -> Result<TemporalReport> {
    let groups = group_by_context(corpus);
    let mut selected = Vec::new();
    for g in &groups {
        let items = temporal_items(g)?;
        if items.len() >= min_items.max(2) {
            selected.push(items);
        }
    }
    if selected.is_empty() {
        return Err(Error::Empty(format!("no context has at least {min_items} usable passages")));
    }
    let tokenizer = model.config.encoder.tokenizer();
    let counts = selected
        .par_iter()
        .map(|items| {
            let tokens: Vec<TokenSeq> = items.iter().map(|p| tokenizer.tokenize(&p.text)).collect();
            let refs: Vec<&TokenSeq> = tokens.iter().collect();
            let m = margin_matrix(model, &refs)?;
            let n = items.len();
            let mut agree = 0usize;
            let mut total = 0usize;
            for e in 0..n {
                for l in e + 1..n {
                    if items[e].timestamp == items[l].timestamp {
                        continue;
                    }
                    total += 1;
                    if m[l * n + e] > 0.0 {
                        agree += 1;
                    }
                }
            }
            Ok((agree, total))
        })
        .collect::<Result<Vec<_>>>()?;
    let (agree, total) = counts.iter().fold((0, 0), |(a, t), (x, y)| (a + x, t + y));
    if total == 0 {
        return Err(Error::Empty("no temporally ordered pairs".into()));
    }
    Ok(TemporalReport {
        accuracy: agree as f64 / total as f64,
        pairs: total,
        contexts: selected.len(),
        min_items,
    })
}

/// Segment sizes for `n` ranked items, top segment first.
///
/// Without proportions, segments are equal and the remainder goes to the
/// earliest segments. With proportions, boundaries are rounded cumulative
/// shares of `n`.
pub fn segment_sizes(n: usize, segments: usize, proportions: Option<&[f64]>) -> Result<Vec<usize>> {
    if segments < 2 {
        return Err(Error::Config("at least two segments are required".into()));
    }
    if n < segments {
        return Err(Error::Config(format!("{n} items cannot fill {segments} segments")));
    }
    match proportions {
        None => {
            let (base, rem) = (n / segments, n % segments);
            Ok((0..segments).map(|s| base + usize::from(s < rem)).collect())
        }
        Some(p) => {
            if p.len() != segments {
                return Err(Error::Config(format!("{} proportions for {segments} segments", p.len())));
            }
            if p.iter().any(|x| !(*x >= 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::Config("proportions must be non-negative and sum to 1".into()));
            }
            let mut acc = 0.0;
            let mut prev = 0usize;
            let mut sizes = Vec::with_capacity(segments);
            for (s, x) in p.iter().enumerate() {
                acc += x;
                let bound = if s + 1 == segments {
                    n
                } else {
                    ((acc * n as f64).round() as usize).clamp(prev, n)
                };
                sizes.push(bound - prev);
                prev = bound;
            }
            Ok(sizes)
        }
    }
}

/// Class labels for a ranked list: `segments` for the top segment down to 1.
pub fn rank_to_classes(ranked: &[String], segments: usize, proportions: Option<&[f64]>) -> Result<Vec<u32>> {
    let sizes = segment_sizes(ranked.len(), segments, proportions)?;
    let mut labels = Vec::with_capacity(ranked.len());
    for (s, &size) in sizes.iter().enumerate() {
        labels.extend(std::iter::repeat((segments - s) as u32).take(size));
    }
    Ok(labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn three_cycle_tiebreak() {
        // a beats b by 1, b beats c by 1, c beats a by 3
        let ids = ["a", "b", "c"];
        let mut m = vec![0.0; 9];
        let mut set = |i: usize, j: usize, v: f64| {
            m[i * 3 + j] = v;
            m[j * 3 + i] = -v;
        };
        set(0, 1, 1.0);
        set(1, 2, 1.0);
        set(2, 0, 3.0);
        let (order, wins, sums) = tournament_order(&ids, &m);
        assert_eq!(wins, vec![1, 1, 1]);
        assert_eq!(sums, vec![-2.0, 0.0, 2.0]);
        assert_eq!(order, vec![2, 1, 0]);
    }

    #[test]
    fn consistent_comparator_gives_truth_order() {
        let scores = [0.3, 2.0, -1.0, 0.9];
        let ids = ["p0", "p1", "p2", "p3"];
        let n = 4;
        let m: Vec<f64> = (0..n * n).map(|k| scores[k / n] - scores[k % n]).collect();
        assert_eq!(tournament_order(&ids, &m).0, vec![1, 3, 0, 2]);
    }

    #[test]
    fn singleton_and_id_tiebreak() {
        assert_eq!(tournament_order(&["x"], &[0.0]).0, vec![0]);
        assert_eq!(tournament_order(&["b", "a"], &[0.0; 4]).0, vec![1, 0]);
    }

    #[test]
    fn ideal_ranking_has_unit_ndcg() {
        let m = list_metrics(&["a", "b", "c"], &[3.0, 2.0, 1.0], &MetricsConfig { k: 3, ..Default::default() }).unwrap();
        assert_eq!(m.ndcg, 1.0);
        assert_eq!(m.mrr, 1.0);
        assert_eq!(m.map, 1.0);
    }

    #[test]
    fn ndcg_hand_value() {
        let cfg = MetricsConfig { k: 3, ..Default::default() };
        let m = list_metrics(&["b", "a", "c"], &[2.0, 3.0, 1.0], &cfg).unwrap();
        let dcg = 3.0 + 7.0 / 3f64.log2() + 0.5;
        let idcg = 7.0 + 3.0 / 3f64.log2() + 0.5;
        assert!(close(m.ndcg, dcg / idcg));
        assert!((m.ndcg - 0.843).abs() < 1e-3);
    }

    #[test]
    fn mrr_first_relevant_at_two() {
        let cfg = MetricsConfig {
            k: 3,
            relevant_top: Some(1),
            ..Default::default()
        };
        let m = list_metrics(&["a", "b", "c"], &[1.0, 5.0, 0.0], &cfg).unwrap();
        assert_eq!(m.mrr, 0.5);
        assert_eq!(m.map, 0.5);
    }

    #[test]
    fn zero_ideal_gain_gives_zero_ndcg() {
        let m = list_metrics(&["a", "b"], &[0.0, 0.0], &MetricsConfig::default()).unwrap();
        assert_eq!(m.ndcg, 0.0);
    }

    #[test]
    fn linear_gain() {
        let cfg = MetricsConfig {
            k: 2,
            gain: Gain::Linear,
            relevant_top: None,
        };
        let m = list_metrics(&["a", "b"], &[1.0, 2.0], &cfg).unwrap();
        assert!(close(m.ndcg, (1.0 + 2.0 / 3f64.log2()) / (2.0 + 1.0 / 3f64.log2())));
    }

    #[test]
    fn segment_examples() {
        assert_eq!(segment_sizes(7, 5, None).unwrap(), vec![2, 2, 1, 1, 1]);
        assert_eq!(segment_sizes(500, 5, None).unwrap(), vec![100; 5]);
        assert!(segment_sizes(3, 5, None).is_err());
        assert!(segment_sizes(3, 1, None).is_err());
        let p = [0.5, 0.25, 0.25];
        assert_eq!(segment_sizes(10, 3, Some(&p)).unwrap(), vec![5, 3, 2]);
        assert!(segment_sizes(10, 3, Some(&[0.5, 0.5, 0.5])).is_err());
    }

    #[test]
    fn labels_descend_from_top() {
        let ids: Vec<String> = (0..7).map(|i| format!("p{i}")).collect();
        assert_eq!(rank_to_classes(&ids, 5, None).unwrap(), vec![5, 5, 4, 4, 3, 2, 1]);
    }
}
