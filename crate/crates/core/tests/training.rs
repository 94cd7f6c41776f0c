use pairrank::baseline::{accuracy_on, train_classifier, ClassifierConfig};
use pairrank::corpus::{generate_synthetic, Corpus, SyntheticSpec};
use pairrank::encoder::{EncoderConfig, EncoderKind};
use pairrank::evalrank::{evaluate, rank_list, temporal_consistency, MetricsConfig};
use pairrank::pairgen::{group_by_context, pair_stream, PairPolicy};
use pairrank::rankhead::{ModelConfig, ModelParams};
use pairrank::training::{
    checkpoint_load, checkpoint_save, continue_training, run_ablation, set_accuracy, train_loop, LossConfig,
    OptimConfig, PairSet, TrainOutcome,
};

fn small_model() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            kind: EncoderKind::MeanPool,
            hash_dims: 512,
            embed_dim: 16,
            ..EncoderConfig::default()
        },
        ..ModelConfig::default()
    }
}

fn corpus(seed: u64, temporal: bool) -> Corpus {
    sized_corpus(seed, temporal, 8)
}

fn sized_corpus(seed: u64, temporal: bool, num_contexts: usize) -> Corpus {
    generate_synthetic(&SyntheticSpec {
        num_contexts,
        temporal,
        seed,
        ..SyntheticSpec::default()
    })
    .unwrap()
}

fn pairs(c: &Corpus, cfg: &ModelConfig) -> PairSet {
    PairSet::new(c, &pair_stream(c, &PairPolicy::default()), &cfg.encoder.tokenizer()).unwrap()
}

fn optim(steps: u64) -> OptimConfig {
    OptimConfig {
        learning_rate: 1e-3,
        max_steps: steps,
        probe_interval: 10,
        ..OptimConfig::default()
    }
}

fn run(steps: u64) -> TrainOutcome {
    let cfg = small_model();
    let set = pairs(&corpus(1, false), &cfg);
    train_loop(&set, None, &cfg, &LossConfig::default(), &optim(steps)).unwrap()
}

#[test]
fn same_seed_gives_identical_parameters() {
    let a = run(25);
    let b = run(25);
    assert_eq!(a.model, b.model);
    assert_eq!(a.state, b.state);
    assert_eq!(a.log.steps_completed, 25);
}

#[test]
fn different_seeds_differ() {
    let cfg = small_model();
    let set = pairs(&corpus(1, false), &cfg);
    let a = train_loop(&set, None, &cfg, &LossConfig::default(), &optim(5)).unwrap();
    let b = train_loop(&set, None, &cfg, &LossConfig::default(), &OptimConfig { seed: 7, ..optim(5) }).unwrap();
    assert_ne!(a.model.store, b.model.store);
}

#[test]
fn zero_steps_returns_the_initialization() {
    let out = run(0);
    assert_eq!(out.model, ModelParams::init(&small_model(), optim(0).seed).unwrap());
    assert_eq!(out.log.steps_completed, 0);
    assert!(out.log.entries.is_empty());
}

#[test]
fn resuming_from_a_checkpoint_matches_an_uninterrupted_run() {
    let cfg = small_model();
    let set = pairs(&corpus(1, false), &cfg);
    let loss = LossConfig::default();
    let full = train_loop(&set, None, &cfg, &loss, &optim(37)).unwrap();
    let half = train_loop(&set, None, &cfg, &loss, &optim(16)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("half.ckpt");
    checkpoint_save(&path, &half.model, Some(&half.state), &loss, &optim(16)).unwrap();
    let back = checkpoint_load(&path).unwrap();
    let resumed = continue_training(back.model, back.state.unwrap(), &set, None, &loss, &optim(37)).unwrap();
    assert_eq!(resumed.model, full.model);
    assert_eq!(resumed.state, full.state);
}

#[test]
fn divergence_keeps_last_finite_parameters() {
    let cfg = small_model();
    let set = pairs(&corpus(1, false), &cfg);
    let wild = OptimConfig {
        learning_rate: 1e39,
        weight_decay: 0.0,
        ..optim(10)
    };
    let out = train_loop(&set, None, &cfg, &LossConfig::default(), &wild).unwrap();
    assert!(out.log.diverged.is_some(), "{:?}", out.log);
    assert_eq!(out.log.steps_completed, 0);
    assert!(out.model.store.iter().all(|p| p.data.iter().all(|x| x.is_finite())));
    assert_eq!(out.model, ModelParams::init(&cfg, wild.seed).unwrap());
}

#[test]
fn training_improves_held_out_ranking() {
    let cfg = small_model();
    let train = pairs(&sized_corpus(1, false, 40), &cfg);
    let test_corpus = corpus(2, false);
    let test = pairs(&test_corpus, &cfg);
    let before = set_accuracy(&ModelParams::init(&cfg, 42).unwrap(), &test).unwrap();
    let out = train_loop(&train, Some(&test), &cfg, &LossConfig::default(), &optim(2000)).unwrap();
    let after = set_accuracy(&out.model, &test).unwrap();
    assert!(after.canonical > 0.9, "{before:?} -> {after:?}");
    assert!(after.canonical > before.canonical);
    assert!(out.log.entries.last().unwrap().probe_accuracy.is_some());

    let report = evaluate(&out.model, &test_corpus, &MetricsConfig::default()).unwrap();
    assert!(report.ndcg > 0.9, "{report:?}");
    for g in group_by_context(&test_corpus) {
        let ranked = rank_list(&out.model, &g).unwrap();
        let mut ids = ranked.ids.clone();
        ids.sort();
        let mut want: Vec<String> = g.passages.iter().map(|p| p.id.clone()).collect();
        want.sort();
        assert_eq!(ids, want);
    }
}

#[test]
fn temporal_order_is_recovered() {
    let cfg = small_model();
    let train = pairs(&sized_corpus(3, true, 40), &cfg);
    let out = train_loop(&train, None, &cfg, &LossConfig::default(), &optim(2000)).unwrap();
    let report = temporal_consistency(&out.model, &corpus(4, true), 3).unwrap();
    assert!(report.accuracy > 0.9, "{report:?}");
    assert!(report.pairs > 0);
}

#[test]
fn missing_timestamps_are_rejected() {
    let model = ModelParams::init(&small_model(), 1).unwrap();
    assert!(temporal_consistency(&model, &corpus(1, false), 2).is_err());
}

#[test]
fn ablation_runs_every_variant_with_the_same_budget() {
    let cfg = small_model();
    let report = run_ablation(
        &corpus(5, false),
        &corpus(6, false),
        &cfg,
        &LossConfig::default(),
        &optim(30),
        &PairPolicy::default(),
    )
    .unwrap();
    let names: Vec<&str> = report.runs.iter().map(|r| r.name.as_str()).collect();
    assert_eq!(names, ["full", "single_linear", "unshared"]);
    assert!(report.runs.iter().all(|r| !r.diverged && r.accuracy.pairs == report.test_pairs));
}

#[test]
fn classifier_separates_planted_classes() {
    let train = generate_synthetic(&SyntheticSpec {
        num_contexts: 400,
        seed: 8,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let test = generate_synthetic(&SyntheticSpec {
        num_contexts: 10,
        seed: 9,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let cfg = ClassifierConfig {
        encoder: EncoderConfig {
            kind: EncoderKind::MeanPool,
            hash_dims: 4096,
            ..EncoderConfig::default()
        },
        ..ClassifierConfig::default()
    };
    let out = train_classifier(&train, &cfg, &optim(3000)).unwrap();
    assert!(out.diverged.is_none());
    let acc = accuracy_on(&out.params, &test, 5).unwrap();
    assert!(acc >= 0.95, "accuracy {acc}");
}
