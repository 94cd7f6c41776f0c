//! Acceptance suite: one PASS or FAIL line per criterion, nonzero exit on any
//! failure. Pass criterion numbers as arguments to run a subset.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use pairrank::baseline::{head_to_head, CompareConfig};
use pairrank::corpus::{generate_synthetic, Corpus, Passage, PassagesPerContext, SyntheticSpec};
use pairrank::encoder::{EncoderConfig, EncoderKind, TokenSeq};
use pairrank::evalrank::{list_metrics, rank_to_classes, temporal_consistency, Gain, ListMetrics, MetricsConfig};
use pairrank::gradcheck::{check_ranker, TOLERANCE};
use pairrank::pairgen::{pair_stream, Label, PairOrder, PairPolicy};
use pairrank::rankhead::{HeadConfig, HeadVariant, ModelConfig, ModelParams, ScorePair};
use pairrank::training::{margin_loss, run_ablation, set_accuracy, train_loop, BatchPair, LossConfig, OptimConfig, PairSet};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

type Outcome = Result<String, String>;

struct Criterion {
    number: u32,
    name: &'static str,
    budget: Option<Duration>,
    run: fn() -> Outcome,
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn loss_oracle() -> Outcome {
    let cfg = LossConfig { margin: 2.0 };
    let s = |a: f64, b: f64| ScorePair {
        score_first: a,
        score_second: b,
    };
    let cases = [
        (s(5.0, 0.0), Label::FirstHigher, 0.0),
        (s(0.0, 0.0), Label::FirstHigher, 2.0),
        (s(1.0, 0.0), Label::SecondHigher, 3.0),
    ];
    for (scores, label, want) in cases {
        let got = margin_loss(scores, label, &cfg);
        ensure(got == want, || format!("{scores:?} {label:?}: {got} != {want}"))?;
    }
    let mut rng = StdRng::seed_from_u64(1);
    for _ in 0..1000 {
        let (a, b) = (rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0));
        let label = if rng.gen() { Label::FirstHigher } else { Label::SecondHigher };
        let gamma: f64 = rng.gen_range(0.0..5.0);
        let e = if label == Label::FirstHigher { 1.0 } else { -1.0 };
        let want = f64::max(0.0, -e * (a - b) + gamma);
        let got = margin_loss(s(a, b), label, &LossConfig { margin: gamma });
        ensure(got == want, || format!("({a}, {b}, {e}, {gamma}): {got} != {want}"))?;
    }
    Ok("3 hand cases and 1000 random triples exact".into())
}

fn gradients() -> Outcome {
    const BATCH: usize = 16;
    let t: Vec<TokenSeq> = (0..=BATCH as u32)
        .map(|i| {
            let len = 1 + (i * 5 % 6) as usize;
            TokenSeq::new((0..len as u32).map(|j| (i * 7 + j * 3) % 16).collect())
        })
        .collect();
    let batch: Vec<BatchPair<'_>> = (0..BATCH)
        .map(|i| BatchPair {
            first: &t[i],
            second: &t[i + 1],
            label: if i % 3 == 0 { Label::SecondHigher } else { Label::FirstHigher },
        })
        .collect();
    let mut lines = Vec::new();
    for kind in [EncoderKind::MeanPool, EncoderKind::TinyAttention] {
        for variant in [HeadVariant::Mlp4, HeadVariant::SingleLinear] {
            let cfg = ModelConfig {
                encoder: EncoderConfig {
                    kind,
                    hash_dims: 16,
                    embed_dim: 8,
                    max_tokens: 8,
                    layers: 2,
                    heads: 2,
                    ff_dim: 16,
                    dropout: 0.1,
                },
                head: HeadConfig {
                    variant,
                    ..HeadConfig::default()
                },
                shared_encoder: true,
            };
            let model = ModelParams::init(&cfg, 7).map_err(err)?;
            let n = model.store.num_trainable_scalars();
            ensure(n <= 5000, || format!("{kind:?}/{variant:?} has {n} parameters"))?;
            let r = check_ranker(&model, &batch, &LossConfig { margin: 50.0 }).map_err(err)?;
            ensure(r.checked == n, || format!("{kind:?}/{variant:?}: checked {} of {n}", r.checked))?;
            ensure(r.worst_error < TOLERANCE, || {
                format!("{kind:?}/{variant:?}: relative error {:.2e} at {}", r.worst_error, r.worst_at)
            })?;
            lines.push(format!("{kind:?}/{variant:?} {n} params worst {:.1e}", r.worst_error));
        }
    }
    Ok(lines.join("; "))
}

/// Independent reference: relevance by counting better items, ideal DCG from
/// the gains sorted directly.
fn metrics_oracle(ids: &[&str], truth: &[f64], cfg: &MetricsConfig) -> ListMetrics {
    let n = ids.len();
    let k = cfg.k.min(n);
    let m = cfg.relevant_top.unwrap_or(cfg.k).min(n);
    let better = |j: usize, i: usize| truth[j] > truth[i] || (truth[j] == truth[i] && ids[j] < ids[i]);
    let relevant: Vec<bool> = (0..n).map(|i| (0..n).filter(|&j| better(j, i)).count() < m).collect();
    let gain = |r: f64| match cfg.gain {
        Gain::Exponential => 2f64.powf(r) - 1.0,
        Gain::Linear => r,
    };
    let disc = |i: usize| 1.0 / ((i + 2) as f64).log2();
    let dcg: f64 = (0..k).map(|i| gain(truth[i]) * disc(i)).sum();
    let mut gains: Vec<f64> = truth.iter().map(|&r| gain(r)).collect();
    gains.sort_by(|a, b| b.total_cmp(a));
    let idcg: f64 = (0..k).map(|i| gains[i] * disc(i)).sum();
    let mut mrr = 0.0;
    for i in 0..k {
        if relevant[i] {
            mrr = 1.0 / (i + 1) as f64;
            break;
        }
    }
    let mut ap = 0.0;
    for i in 0..k {
        if relevant[i] {
            let hits_so_far = relevant[..=i].iter().filter(|&&r| r).count();
            ap += hits_so_far as f64 / (i + 1) as f64;
        }
    }
    ListMetrics {
        mrr,
        ndcg: if idcg == 0.0 { 0.0 } else { dcg / idcg },
        map: ap / m.min(cfg.k) as f64,
    }
}

fn metrics() -> Outcome {
    let mut rng = StdRng::seed_from_u64(3);
    let mut worst = 0f64;
    for case in 0..1000 {
        let n = rng.gen_range(1..=12);
        let mut names: Vec<String> = (0..n).map(|i| format!("p{i:02}")).collect();
        names.shuffle(&mut rng);
        let ids: Vec<&str> = names.iter().map(String::as_str).collect();
        let truth: Vec<f64> = if case % 4 == 0 {
            (0..n).map(|_| rng.gen_range(0.0..4.0)).collect()
        } else {
            (0..n).map(|_| f64::from(rng.gen_range(0..5u8))).collect()
        };
        let cfg = MetricsConfig {
            k: *[1, 2, 5, 10].choose(&mut rng).unwrap(),
            gain: if case % 3 == 0 { Gain::Linear } else { Gain::Exponential },
            relevant_top: if case % 5 == 0 { Some(rng.gen_range(1..=4)) } else { None },
        };
        let got = list_metrics(&ids, &truth, &cfg).map_err(err)?;
        let want = metrics_oracle(&ids, &truth, &cfg);
        for (name, g, w) in [("mrr", got.mrr, want.mrr), ("ndcg", got.ndcg, want.ndcg), ("map", got.map, want.map)] {
            worst = worst.max((g - w).abs());
            ensure((g - w).abs() <= 1e-12, || format!("case {case} {name}: {g} vs {w} ({ids:?} {truth:?} {cfg:?})"))?;
        }
        let mut ideal: Vec<usize> = (0..n).collect();
        ideal.sort_by(|&a, &b| truth[b].total_cmp(&truth[a]));
        let ideal_ids: Vec<&str> = ideal.iter().map(|&i| ids[i]).collect();
        let ideal_truth: Vec<f64> = ideal.iter().map(|&i| truth[i]).collect();
        let best = list_metrics(&ideal_ids, &ideal_truth, &cfg).map_err(err)?;
        let positive = ideal_truth.iter().take(cfg.k).any(|&t| t > 0.0);
        ensure(!positive || best.ndcg == 1.0, || format!("case {case}: ideal NDCG {}", best.ndcg))?;
    }
    Ok(format!("1000 lists, max deviation {worst:.1e}, ideal NDCG exactly 1"))
}

fn pairs() -> Outcome {
    let mut rng = StdRng::seed_from_u64(4);
    let mut total = 0usize;
    for case in 0..100 {
        let mut passages = Vec::new();
        for c in 0..rng.gen_range(1..=6) {
            for i in 0..rng.gen_range(1..=9) {
                let score = f64::from(rng.gen_range(0..4u8));
                passages.push(Passage::new(format!("c{c}p{i}"), format!("c{c}"), "text", score));
            }
        }
        passages.shuffle(&mut rng);
        let corpus = Corpus::new(passages).map_err(err)?;
        let mut by_context: HashMap<&str, Vec<f64>> = HashMap::new();
        for p in corpus.passages() {
            by_context.entry(&p.context_id).or_default().push(p.score);
        }
        let formula: usize = by_context
            .values()
            .map(|scores| {
                let n = scores.len();
                let mut counts: HashMap<u64, usize> = HashMap::new();
                for s in scores {
                    *counts.entry(s.to_bits()).or_default() += 1;
                }
                n * (n - 1) / 2 - counts.values().map(|c| c * (c - 1) / 2).sum::<usize>()
            })
            .sum();
        let ps = corpus.passages();
        let mut brute = BTreeSet::new();
        for i in 0..ps.len() {
            for j in 0..ps.len() {
                if ps[i].context_id == ps[j].context_id && ps[i].score > ps[j].score {
                    brute.insert((ps[i].id.clone(), ps[j].id.clone()));
                }
            }
        }
        let order = if case % 2 == 0 { PairOrder::Randomized } else { PairOrder::AsEnumerated };
        let emitted = pair_stream(
            &corpus,
            &PairPolicy {
                canonical_order: order,
                seed: case,
                ..PairPolicy::default()
            },
        );
        let mut seen = BTreeSet::new();
        for p in &emitted {
            let (a, b) = (corpus.get(&p.first).unwrap(), corpus.get(&p.second).unwrap());
            ensure(a.context_id == b.context_id, || format!("case {case}: cross-context pair {p:?}"))?;
            let better = if p.label == Label::FirstHigher { (a, b) } else { (b, a) };
            seen.insert((better.0.id.clone(), better.1.id.clone()));
        }
        ensure(emitted.len() == formula && brute.len() == formula, || {
            format!("case {case}: emitted {} formula {formula} brute {}", emitted.len(), brute.len())
        })?;
        ensure(seen == brute, || format!("case {case}: emitted pairs differ from enumeration"))?;
        total += emitted.len();
    }
    Ok(format!("100 corpora, {total} pairs, none across contexts"))
}

fn pair_set(corpus: &Corpus, cfg: &ModelConfig, seed: u64) -> Result<PairSet, String> {
    let policy = PairPolicy {
        seed,
        ..PairPolicy::default()
    };
    PairSet::new(corpus, &pair_stream(corpus, &policy), &cfg.encoder.tokenizer()).map_err(err)
}

fn overfit() -> Outcome {
    let corpus = generate_synthetic(&SyntheticSpec {
        num_contexts: 4,
        passages_per_context: PassagesPerContext::Fixed(10),
        ..SyntheticSpec::default()
    })
    .map_err(err)?;
    let cfg = ModelConfig {
        encoder: EncoderConfig {
            kind: EncoderKind::MeanPool,
            ..EncoderConfig::default()
        },
        ..ModelConfig::default()
    };
    let set = pair_set(&corpus, &cfg, 42)?;
    let optim = OptimConfig {
        max_steps: 2000,
        ..OptimConfig::default()
    };
    let out = train_loop(&set, Some(&set), &cfg, &LossConfig::default(), &optim).map_err(err)?;
    let acc = set_accuracy(&out.model, &set).map_err(err)?;
    ensure(out.log.diverged.is_none(), || "training diverged".into())?;
    let first = out
        .log
        .entries
        .iter()
        .find(|e| e.probe_accuracy.is_some_and(|a| a >= 0.95))
        .map(|e| e.step);
    ensure(acc.canonical >= 0.95, || format!("held-in pair accuracy {:.3}", acc.canonical))?;
    Ok(format!(
        "{} passages, {} pairs, held-in accuracy {:.3}, first probe >= 0.95 at step {first:?}",
        corpus.len(),
        acc.pairs,
        acc.canonical
    ))
}

fn skew() -> Outcome {
    let mut gaps = Vec::new();
    let mut lines = Vec::new();
    for seed in 42..45 {
        let noise_rate = 0.2;
        let train = generate_synthetic(&SyntheticSpec {
            num_contexts: 50,
            passages_per_context: PassagesPerContext::Fixed(100),
            class_probabilities: [0.02, 0.09, 0.61, 0.19, 0.09],
            noise_rate,
            seed,
            ..SyntheticSpec::default()
        })
        .map_err(err)?;
        let test = generate_synthetic(&SyntheticSpec {
            num_contexts: 5,
            passages_per_context: PassagesPerContext::Fixed(100),
            balanced: true,
            noise_rate,
            seed: seed + 1000,
            ..SyntheticSpec::default()
        })
        .map_err(err)?;
        let cfg = CompareConfig {
            model: ModelConfig {
                encoder: EncoderConfig {
                    hash_dims: 4096,
                    ..EncoderConfig::default()
                },
                ..ModelConfig::default()
            },
            optim: OptimConfig {
                learning_rate: 4e-4,
                max_steps: 3000,
                seed,
                ..OptimConfig::default()
            },
            classifier_lr_grid: vec![4e-4, 1e-3, 4e-3],
            pairs: PairPolicy {
                seed,
                ..PairPolicy::default()
            },
            ..CompareConfig::default()
        };
        let r = head_to_head(&train, &test, &cfg).map_err(err)?;
        ensure(r.diverged.is_empty(), || format!("seed {seed}: diverged {:?}", r.diverged))?;
        lines.push(format!("{seed}: {:.3} vs {:.3}", r.ranker_accuracy, r.classifier_accuracy));
        gaps.push(r.gap);
    }
    let gap = median(gaps);
    ensure(gap >= 0.10, || format!("median gap {gap:.3} ({})", lines.join(", ")))?;
    Ok(format!("median gap {gap:.3} ({})", lines.join(", ")))
}

fn ablation() -> Outcome {
    let (mut full, mut single) = (Vec::new(), Vec::new());
    for seed in 42..45 {
        let spec = SyntheticSpec {
            num_contexts: 50,
            passages_per_context: PassagesPerContext::Fixed(10),
            seed,
            ..SyntheticSpec::default()
        };
        let train = generate_synthetic(&spec).map_err(err)?;
        let test = generate_synthetic(&SyntheticSpec { seed: seed + 1000, ..spec }).map_err(err)?;
        let optim = OptimConfig {
            seed,
            ..OptimConfig::default()
        };
        let policy = PairPolicy {
            seed,
            ..PairPolicy::default()
        };
        let r = run_ablation(&train, &test, &ModelConfig::default(), &LossConfig::default(), &optim, &policy)
            .map_err(err)?;
        let acc = |name: &str| r.runs.iter().find(|x| x.name == name).map(|x| x.accuracy.canonical);
        full.push(acc("full").ok_or("no full run")?);
        single.push(acc("single_linear").ok_or("no single_linear run")?);
    }
    let (f, s) = (median(full.clone()), median(single.clone()));
    let detail = format!("median full {f:.3} vs single_linear {s:.3} (full {full:.3?}, single {single:.3?})");
    ensure(f >= s, || detail.clone())?;
    Ok(detail)
}

fn temporal() -> Outcome {
    let spec = SyntheticSpec {
        num_contexts: 100,
        passages_per_context: PassagesPerContext::Fixed(10),
        temporal: true,
        seed: 42,
        ..SyntheticSpec::default()
    };
    let train = generate_synthetic(&spec).map_err(err)?;
    let test = generate_synthetic(&SyntheticSpec { seed: 1042, ..spec }).map_err(err)?;
    let cfg = ModelConfig {
        encoder: EncoderConfig {
            hash_dims: 4096,
            ..EncoderConfig::default()
        },
        ..ModelConfig::default()
    };
    let (tr, te) = (pair_set(&train, &cfg, 42)?, pair_set(&test, &cfg, 42)?);
    let optim = OptimConfig {
        max_steps: 6000,
        ..OptimConfig::default()
    };
    let out = train_loop(&tr, None, &cfg, &LossConfig::default(), &optim).map_err(err)?;
    let acc = set_accuracy(&out.model, &te).map_err(err)?;
    let tc = temporal_consistency(&out.model, &test, 3).map_err(err)?;
    let detail = format!(
        "held-out pair accuracy {:.3}, temporal consistency {:.3} over {} pairs",
        acc.canonical, tc.accuracy, tc.pairs
    );
    ensure(acc.canonical >= 0.95 && tc.accuracy >= 0.90, || detail.clone())?;
    Ok(detail)
}

fn cli(dir: &Path, threads: usize, args: &[&str]) -> Result<Vec<u8>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_pairrank"))
        .current_dir(dir)
        .args(args)
        .args(["--threads", &threads.to_string()])
        .output()
        .map_err(err)?;
    ensure(out.status.success(), || {
        format!("pairrank {args:?} failed: {}", String::from_utf8_lossy(&out.stderr))
    })?;
    Ok(out.stdout)
}

fn determinism() -> Outcome {
    let run = |threads: usize| -> Result<Vec<Vec<u8>>, String> {
        let dir = tempfile::tempdir().map_err(err)?;
        let p = dir.path();
        let data = cli(p, threads, &["gen-data", "--contexts", "8", "--out", "data.jsonl"])?;
        let train = cli(
            p,
            threads,
            &[
                "train", "--data", "data.jsonl", "--out", "model.ckpt", "--hash-dims", "4096", "--steps", "200",
            ],
        )?;
        let eval = cli(p, threads, &["eval", "--model", "model.ckpt", "--data", "data.jsonl"])?;
        let ckpt = std::fs::read(p.join("model.ckpt")).map_err(err)?;
        Ok(vec![data, train, eval, ckpt])
    };
    let a = run(1)?;
    let b = run(1)?;
    let c = run(4)?;
    let names = ["gen-data report", "train report", "eval report", "checkpoint"];
    for (i, name) in names.iter().enumerate() {
        ensure(a[i] == b[i], || format!("{name} differs between identical runs"))?;
        ensure(a[i] == c[i], || format!("{name} differs between 1 and 4 threads"))?;
    }
    Ok(format!("checkpoint of {} bytes and 3 reports identical across 3 runs", a[3].len()))
}

fn conversion() -> Outcome {
    let corpus = generate_synthetic(&SyntheticSpec {
        num_contexts: 5,
        passages_per_context: PassagesPerContext::Fixed(100),
        balanced: true,
        ..SyntheticSpec::default()
    })
    .map_err(err)?;
    let mut ps: Vec<&Passage> = corpus.passages().iter().collect();
    ensure(ps.len() == 500, || format!("{} passages", ps.len()))?;
    ps.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.id.cmp(&b.id)));
    let ids: Vec<String> = ps.iter().map(|p| p.id.clone()).collect();
    let labels = rank_to_classes(&ids, 5, None).map_err(err)?;
    let hits = ps.iter().zip(&labels).filter(|(p, l)| p.class() == Some(**l)).count();
    let mut sizes = vec![0usize; 5];
    for l in &labels {
        sizes[*l as usize - 1] += 1;
    }
    ensure(hits == 500, || format!("accuracy {}", hits as f64 / 500.0))?;
    ensure(sizes == [100; 5], || format!("segment sizes {sizes:?}"))?;
    Ok("accuracy 1.0, segments [100; 5]".into())
}

fn main() {
    let minutes = |m: u64| Some(Duration::from_secs(60 * m));
    let criteria = [
        Criterion { number: 1, name: "loss oracle", budget: Some(Duration::from_secs(1)), run: loss_oracle },
        Criterion { number: 2, name: "gradient correctness", budget: minutes(2), run: gradients },
        Criterion { number: 3, name: "metric oracle", budget: Some(Duration::from_secs(10)), run: metrics },
        Criterion { number: 4, name: "pair combinatorics", budget: Some(Duration::from_secs(10)), run: pairs },
        Criterion { number: 5, name: "overfit sanity", budget: minutes(2), run: overfit },
        Criterion { number: 6, name: "skew robustness", budget: minutes(15), run: skew },
        Criterion { number: 7, name: "ablation direction", budget: minutes(10), run: ablation },
        Criterion { number: 8, name: "temporal consistency", budget: minutes(5), run: temporal },
        Criterion { number: 9, name: "determinism", budget: minutes(5), run: determinism },
        Criterion { number: 10, name: "conversion exactness", budget: None, run: conversion },
    ];
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for c in criteria.iter().filter(|c| only.is_empty() || only.contains(&c.number)) {
        let start = Instant::now();
        let result = (c.run)();
        let took = start.elapsed();
        let result = match (result, c.budget) {
            (Ok(d), Some(b)) if took > b => Err(format!("{d}; took {took:.1?}, budget {b:?}")),
            (r, _) => r,
        };
        match result {
            Ok(detail) => println!("PASS {:>2} {}: {detail} [{took:.1?}]", c.number, c.name),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {}: {detail} [{took:.1?}]", c.number, c.name);
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
