use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use pairrank::baseline::{head_to_head, CompareConfig};
use pairrank::canonical::to_canonical_bytes;
use pairrank::corpus::{generate_synthetic, load_dataset, save_dataset, Corpus, Format, Passage};
use pairrank::evalrank::{evaluate, rank_list, rank_passages, rank_to_classes, segment_sizes, temporal_consistency};
use pairrank::pairgen::{group_by_context, pair_stream, write_pair_shards, write_pairs};
use pairrank::training::{
    checkpoint_load, checkpoint_save, continue_training, grid_search, run_ablation, set_accuracy, train_loop,
    Checkpoint, OptimState, PairSet,
};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{RunConfig, UsageError};
use crate::Command;

/// Commands that read a checkpoint take the architecture from it, and the
/// echoed configuration says so.
fn effective_config(command: Command, cfg: &RunConfig) -> Result<RunConfig> {
    let uses_checkpoint = matches!(command, Command::Eval | Command::Rank | Command::Convert | Command::Temporal)
        || (command == Command::Train && cfg.model.is_some());
    let mut cfg = cfg.clone();
    if uses_checkpoint {
        let ckpt = load_model(&cfg)?;
        cfg.architecture = ckpt.model.config;
    }
    Ok(cfg)
}

pub fn run(command: Command, cfg: &RunConfig) -> Result<()> {
    let cfg = &effective_config(command, cfg)?;
    let report = match command {
        Command::GenData => gen_data(cfg)?,
        Command::MakePairs => make_pairs(cfg)?,
        Command::Train => train(cfg)?,
        Command::Eval => {
            let ckpt = load_model(cfg)?;
            let corpus = load(cfg.require(&cfg.data, "data")?)?;
            to_value(evaluate(&ckpt.model, &corpus, &cfg.metrics)?)?
        }
        Command::Rank => rank(cfg)?,
        Command::Convert => convert(cfg)?,
        Command::Temporal => {
            let ckpt = load_model(cfg)?;
            let corpus = load(cfg.require(&cfg.data, "data")?)?;
            to_value(temporal_consistency(&ckpt.model, &corpus, cfg.temporal.min_items)?)?
        }
        Command::Ablate => {
            let train = load(cfg.require(&cfg.data, "data")?)?;
            let test = load(cfg.require(&cfg.test, "test")?)?;
            eprintln!("ablate: 3 variants, {} steps each", cfg.optim.max_steps);
            to_value(run_ablation(&train, &test, &cfg.architecture, &cfg.loss, &cfg.optim, &cfg.pairs)?)?
        }
        Command::Grid => {
            let corpus = load(cfg.require(&cfg.data, "data")?)?;
            eprintln!(
                "grid: {} margins x {} learning rates, {} steps per cell",
                cfg.grid.margins.len(),
                cfg.grid.learning_rates.len(),
                cfg.grid.steps
            );
            to_value(grid_search(&corpus, &cfg.grid, &cfg.architecture, &cfg.optim, &cfg.pairs)?)?
        }
        Command::Compare => compare(cfg)?,
    };
    emit(report, cfg)
}

fn to_value<T: Serialize>(v: T) -> Result<Value> {
    Ok(serde_json::to_value(v)?)
}

/// Prints `report` with the resolved configuration attached as `run_config`.
fn emit(mut report: Value, cfg: &RunConfig) -> Result<()> {
    let obj = report.as_object_mut().context("report is not a JSON object")?;
    obj.insert("run_config".into(), serde_json::to_value(cfg)?);
    let bytes = to_canonical_bytes(&report)?;
    let mut out = std::io::stdout().lock();
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(())
}

fn load(path: &Path) -> Result<Corpus> {
    Ok(load_dataset(path, Format::from_path(path))?)
}

fn load_model(cfg: &RunConfig) -> Result<Checkpoint> {
    Ok(checkpoint_load(cfg.require(&cfg.model, "model")?)?)
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

fn gen_data(cfg: &RunConfig) -> Result<Value> {
    let out = cfg.require(&cfg.out, "out")?;
    let corpus = generate_synthetic(&cfg.synthetic)?;
    save_dataset(&corpus, out, Format::from_path(out))?;
    eprintln!("gen-data: wrote {} passages to {}", corpus.len(), out.display());
    Ok(json!({
        "passages": corpus.len(),
        "contexts": group_by_context(&corpus).len(),
        "class_distribution": corpus.class_distribution(5),
        "out": display(out),
    }))
}

fn make_pairs(cfg: &RunConfig) -> Result<Value> {
    let corpus = load(cfg.require(&cfg.data, "data")?)?;
    let out = cfg.require(&cfg.out, "out")?;
    let pairs = pair_stream(&corpus, &cfg.pairs);
    let files = match cfg.shard_size {
        Some(n) => write_pair_shards(&pairs, out, n)?,
        None => {
            write_pairs(&pairs, out)?;
            vec![out.to_path_buf()]
        }
    };
    eprintln!("make-pairs: {} pairs in {} file(s)", pairs.len(), files.len());
    Ok(json!({
        "pairs": pairs.len(),
        "contexts": group_by_context(&corpus).len(),
        "files": files.iter().map(|p| display(p)).collect::<Vec<_>>(),
    }))
}

fn pair_set(corpus: &Corpus, cfg: &RunConfig, tokenizer: &pairrank::encoder::Tokenizer) -> Result<PairSet> {
    Ok(PairSet::new(corpus, &pair_stream(corpus, &cfg.pairs), tokenizer)?)
}

fn train(cfg: &RunConfig) -> Result<Value> {
    let corpus = load(cfg.require(&cfg.data, "data")?)?;
    let out = cfg.require(&cfg.out, "out")?;
    let resume = match &cfg.model {
        Some(p) => Some(checkpoint_load(p)?),
        None => None,
    };
    let architecture = resume.as_ref().map_or(&cfg.architecture, |c| &c.model.config);
    let tokenizer = architecture.encoder.tokenizer();
    let set = pair_set(&corpus, cfg, &tokenizer)?;
    let probe = match &cfg.test {
        Some(p) => Some(pair_set(&load(p)?, cfg, &tokenizer)?),
        None => None,
    };
    eprintln!("train: {} pairs, up to {} steps", set.len(), cfg.optim.max_steps);
    let outcome = match resume {
        Some(c) => {
            let state = c.state.unwrap_or_else(|| OptimState::new(&c.model.store));
            eprintln!("train: resuming at step {}", state.step);
            continue_training(c.model, state, &set, probe.as_ref(), &cfg.loss, &cfg.optim)?
        }
        None => train_loop(&set, probe.as_ref(), &cfg.architecture, &cfg.loss, &cfg.optim)?,
    };
    for e in &outcome.log.entries {
        match e.probe_accuracy {
            Some(a) => eprintln!("step {:>6}  loss {:.4}  probe {:.4}  {:.1}s", e.step, e.mean_loss, a, e.elapsed_secs),
            None => eprintln!("step {:>6}  loss {:.4}  {:.1}s", e.step, e.mean_loss, e.elapsed_secs),
        }
    }
    if let Some(d) = &outcome.log.diverged {
        eprintln!("train: stopped early, {d}");
    }
    checkpoint_save(out, &outcome.model, Some(&outcome.state), &cfg.loss, &cfg.optim)?;
    let train_accuracy = set_accuracy(&outcome.model, &set)?;
    let probe_accuracy = match &probe {
        Some(p) if !p.is_empty() => Some(set_accuracy(&outcome.model, p)?),
        _ => None,
    };
    // elapsed times stay on stderr so the report is reproducible
    let log: Vec<Value> = outcome
        .log
        .entries
        .iter()
        .map(|e| json!({"step": e.step, "mean_loss": e.mean_loss, "probe_accuracy": e.probe_accuracy}))
        .collect();
    Ok(json!({
        "checkpoint": display(out),
        "steps_completed": outcome.log.steps_completed,
        "diverged": outcome.log.diverged,
        "train_pairs": set.len(),
        "train_accuracy": train_accuracy,
        "probe_accuracy": probe_accuracy,
        "log": log,
    }))
}

fn rank(cfg: &RunConfig) -> Result<Value> {
    let ckpt = load_model(cfg)?;
    let corpus = load(cfg.require(&cfg.data, "data")?)?;
    let groups = group_by_context(&corpus);
    let chosen: Vec<_> = match &cfg.context {
        Some(c) => {
            let g: Vec<_> = groups.into_iter().filter(|g| g.context_id == c).collect();
            if g.is_empty() {
                bail!("context `{c}` does not occur in the corpus");
            }
            g
        }
        None => groups,
    };
    let lists = chosen
        .iter()
        .map(|g| rank_list(&ckpt.model, g))
        .collect::<pairrank::Result<Vec<_>>>()?;
    Ok(json!({ "lists": lists }))
}

fn convert(cfg: &RunConfig) -> Result<Value> {
    let ckpt = load_model(cfg)?;
    let corpus = load(cfg.require(&cfg.data, "data")?)?;
    let all: Vec<&Passage> = corpus.passages().iter().collect();
    let ranked = rank_passages(&ckpt.model, "corpus", &all)?;
    let proportions = cfg.convert.proportions.as_deref();
    let sizes = segment_sizes(ranked.ids.len(), cfg.convert.segments, proportions)
        .map_err(|e| UsageError(e.to_string()))?;
    let labels = rank_to_classes(&ranked.ids, cfg.convert.segments, proportions)?;
    let truth: Option<Vec<u32>> = ranked
        .ids
        .iter()
        .map(|id| corpus.get(id).and_then(Passage::class))
        .collect();
    let accuracy = truth.map(|t| {
        let hits = t.iter().zip(&labels).filter(|(a, b)| a == b).count();
        hits as f64 / t.len() as f64
    });
    if let Some(out) = &cfg.out {
        let mut relabeled: Vec<Passage> = corpus.passages().to_vec();
        let index = corpus.index();
        for (id, &label) in ranked.ids.iter().zip(&labels) {
            relabeled[index[id.as_str()]].label = Some(label);
        }
        let c = Corpus::new(relabeled)?;
        save_dataset(&c, out, Format::from_path(out))?;
    }
    let predictions: Vec<Value> = ranked
        .ids
        .iter()
        .zip(&labels)
        .map(|(id, l)| json!({"id": id, "class": l}))
        .collect();
    Ok(json!({
        "segment_sizes": sizes,
        "accuracy": accuracy,
        "predictions": predictions,
    }))
}

fn compare(cfg: &RunConfig) -> Result<Value> {
    let train = load(cfg.require(&cfg.data, "data")?)?;
    let test = load(cfg.require(&cfg.test, "test")?)?;
    let cc = CompareConfig {
        model: cfg.architecture.clone(),
        loss: cfg.loss,
        optim: cfg.optim.clone(),
        classifier_learning_rate: cfg.classifier.learning_rate,
        classifier_lr_grid: cfg.classifier.lr_grid.clone(),
        pairs: cfg.pairs.clone(),
        classes: 5,
    };
    eprintln!("compare: ranker and classifier, {} steps each", cfg.optim.max_steps);
    let report = head_to_head(&train, &test, &cc)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    to_value(report)
}
