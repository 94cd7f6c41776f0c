use std::collections::{BTreeSet, HashSet};

use pairrank::corpus::{read_jsonl, split_corpus, to_jsonl, Corpus, Passage, SplitStrategy};
use pairrank::encoder::{EncoderConfig, EncoderKind};
use pairrank::evalrank::{list_metrics, tournament_order, Gain, MetricsConfig};
use pairrank::pairgen::{pair_stream, Label, PairOrder, PairPolicy};
use pairrank::rankhead::{margin_from_scores, ModelConfig, ModelParams, ScorePair};
use pairrank::training::{margin_loss, set_accuracy, LossConfig, PairSet};
use proptest::prelude::*;

fn corpus_strategy(max_contexts: usize, max_per: usize) -> impl Strategy<Value = Corpus> {
    prop::collection::vec(prop::collection::vec((0u8..5, prop::option::of(0i64..50)), 1..=max_per), 1..=max_contexts)
        .prop_map(|groups| {
            let mut passages = Vec::new();
            for (c, items) in groups.iter().enumerate() {
                for (i, (score, ts)) in items.iter().enumerate() {
                    let mut p = Passage::new(format!("c{c}p{i}"), format!("ctx{c}"), format!("words {c} {i} \"quoted\" é"), f64::from(*score));
                    p.timestamp = *ts;
                    passages.push(p);
                }
            }
            Corpus::new(passages).unwrap()
        })
}

/// Relevance, gains and discounts written out position by position.
fn brute_metrics(truth: &[f64], ids: &[String], k: usize, m: usize, gain: Gain) -> (f64, f64, f64) {
    let n = truth.len();
    let g = |r: f64| match gain {
        Gain::Exponential => 2f64.powf(r) - 1.0,
        Gain::Linear => r,
    };
    // an item is relevant when fewer than m items precede it in (truth desc, id asc)
    let relevant: Vec<bool> = (0..n)
        .map(|i| {
            let ahead = (0..n)
                .filter(|&j| truth[j] > truth[i] || (truth[j] == truth[i] && ids[j] < ids[i]))
                .count();
            ahead < m
        })
        .collect();
    let cut = k.min(n);
    let mut mrr = 0.0;
    for i in 0..cut {
        if relevant[i] {
            mrr = 1.0 / (i as f64 + 1.0);
            break;
        }
    }
    let dcg = |order: &[usize]| -> f64 {
        order.iter().take(cut).enumerate().map(|(pos, &i)| g(truth[i]) / (pos as f64 + 2.0).log2()).sum()
    };
    let identity: Vec<usize> = (0..n).collect();
    let mut best = f64::NEG_INFINITY;
    permute(&mut identity.clone(), 0, &mut |p| best = best.max(dcg(p)));
    let ndcg = if best == 0.0 { 0.0 } else { dcg(&identity) / best };
    let rel_total = relevant.iter().filter(|&&r| r).count();
    let mut ap = 0.0;
    for i in 0..cut {
        if relevant[i] {
            let hits = relevant[..=i].iter().filter(|&&r| r).count();
            ap += hits as f64 / (i as f64 + 1.0);
        }
    }
    (mrr, ndcg, ap / rel_total.min(k) as f64)
}

fn permute(v: &mut Vec<usize>, at: usize, f: &mut impl FnMut(&[usize])) {
    if at == v.len() {
        f(v);
        return;
    }
    for i in at..v.len() {
        v.swap(at, i);
        permute(v, at + 1, f);
        v.swap(at, i);
    }
}

fn tiny_model(seed: u64) -> ModelParams {
    let cfg = ModelConfig {
        encoder: EncoderConfig {
            kind: EncoderKind::MeanPool,
            hash_dims: 64,
            embed_dim: 8,
            ..EncoderConfig::default()
        },
        ..ModelConfig::default()
    };
    ModelParams::init(&cfg, seed).unwrap()
}

proptest! {
    #[test]
    fn loss_is_hinge_and_label_symmetric(a in -50.0f64..50.0, b in -50.0f64..50.0, gamma in 0.0f64..10.0, first in any::<bool>()) {
        let label = if first { Label::FirstHigher } else { Label::SecondHigher };
        let cfg = LossConfig { margin: gamma };
        let l = margin_loss(ScorePair { score_first: a, score_second: b }, label, &cfg);
        prop_assert!(l >= 0.0);
        let e = if first { 1.0 } else { -1.0 };
        prop_assert_eq!(l, f64::max(0.0, -e * (a - b) + gamma));
        let swapped = margin_loss(ScorePair { score_first: b, score_second: a }, label.flipped(), &cfg);
        prop_assert_eq!(l, swapped);
    }

    #[test]
    fn margin_is_antisymmetric(a1 in -9.0f64..9.0, b1 in -9.0f64..9.0, a2 in -9.0f64..9.0, b2 in -9.0f64..9.0) {
        let ab = ScorePair { score_first: a1, score_second: b1 };
        let ba = ScorePair { score_first: a2, score_second: b2 };
        prop_assert_eq!(margin_from_scores(ab, ba), -margin_from_scores(ba, ab));
    }

    #[test]
    fn metrics_match_brute_force(
        truth in prop::collection::vec(0u8..5, 1..=7),
        k in prop::sample::select(vec![1usize, 2, 5, 10]),
        m in prop::option::of(1usize..6),
        linear in any::<bool>(),
    ) {
        let truth: Vec<f64> = truth.into_iter().map(f64::from).collect();
        let ids: Vec<String> = (0..truth.len()).map(|i| format!("p{}", (i * 7) % 11)).collect();
        let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
        let gain = if linear { Gain::Linear } else { Gain::Exponential };
        let cfg = MetricsConfig { k, gain, relevant_top: m };
        let got = list_metrics(&refs, &truth, &cfg).unwrap();
        let (mrr, ndcg, map) = brute_metrics(&truth, &ids, k, m.unwrap_or(k), gain);
        prop_assert!((got.mrr - mrr).abs() <= 1e-12, "mrr {} vs {}", got.mrr, mrr);
        prop_assert!((got.ndcg - ndcg).abs() <= 1e-12, "ndcg {} vs {}", got.ndcg, ndcg);
        prop_assert!((got.map - map).abs() <= 1e-12, "map {} vs {}", got.map, map);
        for v in [got.mrr, got.ndcg, got.map] {
            prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
        }
    }

    #[test]
    fn ideal_order_has_unit_ndcg(mut truth in prop::collection::vec(0u8..5, 1..=12), k in 1usize..12) {
        truth.sort_unstable_by(|a, b| b.cmp(a));
        prop_assume!(truth[0] > 0);
        let truth: Vec<f64> = truth.into_iter().map(f64::from).collect();
        let ids: Vec<String> = (0..truth.len()).map(|i| format!("p{i:02}")).collect();
        let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
        let got = list_metrics(&refs, &truth, &MetricsConfig { k, ..MetricsConfig::default() }).unwrap();
        prop_assert_eq!(got.ndcg, 1.0);
        prop_assert_eq!(got.mrr, 1.0);
        prop_assert_eq!(got.map, 1.0);
    }

    #[test]
    fn pairs_match_enumeration(corpus in corpus_strategy(5, 6), seed in 0u64..1000, randomized in any::<bool>()) {
        let policy = PairPolicy {
            seed,
            canonical_order: if randomized { PairOrder::Randomized } else { PairOrder::AsEnumerated },
            ..PairPolicy::default()
        };
        let pairs = pair_stream(&corpus, &policy);
        let ps = corpus.passages();
        let mut expected = BTreeSet::new();
        for (i, a) in ps.iter().enumerate() {
            for b in &ps[i + 1..] {
                if a.context_id == b.context_id && a.score != b.score {
                    let (lo, hi) = if a.id < b.id { (&a.id, &b.id) } else { (&b.id, &a.id) };
                    expected.insert((lo.clone(), hi.clone()));
                }
            }
        }
        let mut seen = BTreeSet::new();
        for p in &pairs {
            let a = corpus.get(&p.first).unwrap();
            let b = corpus.get(&p.second).unwrap();
            prop_assert_eq!(&a.context_id, &b.context_id);
            prop_assert_eq!(Some(p.label), Label::from_scores(a.score, b.score));
            let key = if p.first < p.second { (p.first.clone(), p.second.clone()) } else { (p.second.clone(), p.first.clone()) };
            prop_assert!(seen.insert(key), "duplicate pair");
        }
        prop_assert_eq!(seen, expected);
    }

    #[test]
    fn split_is_a_partition(corpus in corpus_strategy(6, 5), frac in 0.1f64..0.9, seed in 0u64..100, by_context in any::<bool>()) {
        prop_assume!(corpus.len() >= 2);
        let strategy = if by_context { SplitStrategy::ByContext } else { SplitStrategy::Random };
        let contexts: HashSet<&str> = corpus.passages().iter().map(|p| p.context_id.as_str()).collect();
        prop_assume!(!by_context || contexts.len() >= 2);
        let (train, test) = split_corpus(&corpus, strategy, frac, seed).unwrap();
        prop_assert!(!train.is_empty() && !test.is_empty());
        let mut ids: Vec<&str> = train.passages().iter().chain(test.passages()).map(|p| p.id.as_str()).collect();
        ids.sort_unstable();
        let mut all: Vec<&str> = corpus.passages().iter().map(|p| p.id.as_str()).collect();
        all.sort_unstable();
        prop_assert_eq!(ids, all);
        if by_context {
            let tc: HashSet<&str> = train.passages().iter().map(|p| p.context_id.as_str()).collect();
            prop_assert!(test.passages().iter().all(|p| !tc.contains(p.context_id.as_str())));
        }
    }

    #[test]
    fn jsonl_round_trip(corpus in corpus_strategy(4, 4)) {
        let bytes = to_jsonl(&corpus).unwrap();
        let back = read_jsonl(bytes.as_slice()).unwrap();
        prop_assert_eq!(back.passages(), corpus.passages());
        prop_assert_eq!(to_jsonl(&back).unwrap(), bytes);
    }

    #[test]
    fn tournament_recovers_consistent_orders(scores in prop::collection::btree_set(-1000i32..1000, 1..=8), noise in prop::collection::vec(0.5f64..2.0, 64)) {
        // distinct latent scores with positive, non-uniform margin magnitudes
        let scores: Vec<i32> = scores.into_iter().rev().collect::<Vec<_>>();
        let n = scores.len();
        let order: Vec<usize> = (0..n).map(|i| (i * 5 + 3) % n).collect();
        let ids: Vec<String> = (0..n).map(|i| format!("item{i}")).collect();
        let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
        // item order[r] holds the r-th best score
        let mut latent = vec![0i32; n];
        for (r, &i) in order.iter().enumerate() {
            latent[i] = scores[r];
        }
        let mut margins = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                if i < j {
                    let w = noise[(i * 8 + j) % 64];
                    margins[i * n + j] = w * f64::from(latent[i] - latent[j]).signum();
                    margins[j * n + i] = -margins[i * n + j];
                }
            }
        }
        let (got, wins, _) = tournament_order(&refs, &margins);
        let mut expected: Vec<usize> = (0..n).collect();
        expected.sort_by_key(|&i| std::cmp::Reverse(latent[i]));
        prop_assert_eq!(&got, &expected);
        for (r, &i) in got.iter().enumerate() {
            prop_assert_eq!(wins[i] as usize, n - 1 - r);
        }
    }

    #[test]
    fn copeland_matches_definition(n in 1usize..=8, raw in prop::collection::vec(-3i8..=3, 64)) {
        let ids: Vec<String> = (0..n).map(|i| format!("x{}", (i * 3) % 10)).collect();
        let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
        let mut margins = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                margins[i * n + j] = f64::from(raw[i * 8 + j]);
                margins[j * n + i] = -margins[i * n + j];
            }
        }
        let (got, wins, sums) = tournament_order(&refs, &margins);
        let mut sorted = got.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());
        for i in 0..n {
            let w = (0..n).filter(|&j| margins[i * n + j] > 0.0).count();
            let s: f64 = (0..n).map(|j| margins[i * n + j]).sum();
            prop_assert_eq!(wins[i] as usize, w);
            prop_assert_eq!(sums[i], s);
        }
        for pair in got.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            let key = |i: usize| (std::cmp::Reverse(wins[i]), std::cmp::Reverse(ordered(sums[i])), ids[i].clone());
            prop_assert!(key(a) < key(b));
        }
    }
}

fn ordered(x: f64) -> i64 {
    (x * 1e6).round() as i64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn symmetrized_accuracy_ignores_slot_order(seed in 0u64..1000) {
        let corpus = pairrank::corpus::generate_synthetic(&pairrank::corpus::SyntheticSpec {
            num_contexts: 3,
            seed,
            ..Default::default()
        })
        .unwrap();
        let model = tiny_model(seed);
        let tok = model.config.encoder.tokenizer();
        let pairs = pair_stream(&corpus, &PairPolicy { seed, ..PairPolicy::default() });
        let swapped: Vec<_> = pairs.iter().map(|p| p.swapped()).collect();
        let a = set_accuracy(&model, &PairSet::new(&corpus, &pairs, &tok).unwrap()).unwrap();
        let b = set_accuracy(&model, &PairSet::new(&corpus, &swapped, &tok).unwrap()).unwrap();
        prop_assert_eq!(a.symmetrized, b.symmetrized);
        prop_assert_eq!(a.pairs, b.pairs);
    }
}
