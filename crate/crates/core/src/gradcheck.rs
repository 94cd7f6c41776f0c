//! Central finite differences against the hand-written reverse passes.
//!
//! Every trainable coordinate is perturbed by `±h` in f32 and the loss is
//! evaluated in f64 with dropout off and train-mode batch normalization, so
//! the loss is a deterministic function of the fixed batch. The realized f32
//! step is the denominator. A perturbation that flips the sign of any
//! rectifier input straddles a kink, so that coordinate is retried with a
//! smaller step.

use crate::baseline::{classifier_gradients, ClassifierParams};
use crate::encoder::TokenSeq;
use crate::error::{Error, Result};
use crate::nn::{Grads, Mode, ParamStore};
use crate::rankhead::ModelParams;
use crate::training::{compute_gradients, margin_loss, BatchPair, LossConfig};

/// Tried in order until a perturbation stays on one side of every kink.
pub const STEPS: [f32; 3] = [1e-4, 1e-5, 1e-6];
/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Gradients smaller than this are compared in absolute rather than relative terms.
pub const FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Coordinates that needed a smaller step to avoid a kink.
    pub retried: usize,
    pub worst_error: f64,
    /// `name[index]` of the worst coordinate with both estimates.
    pub worst_at: String,
}

/// `|fd - g| / max(|fd|, |g|, FLOOR)`.
pub fn relative_error(fd: f64, analytic: f64) -> f64 {
    (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(FLOOR)
}

/// Compares `grads` with central differences of `loss`, which returns the
/// loss and the rectifier sign pattern at the given parameters.
pub fn check<F>(store: &ParamStore, grads: &Grads, mut loss: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<(f64, Vec<bool>)>,
{
    let mut work = store.clone();
    let (_, base) = loss(&work)?;
    let mut report = GradCheckReport {
        checked: 0,
        retried: 0,
        worst_error: 0.0,
        worst_at: String::new(),
    };
    for id in 0..work.len() {
        if !work.get(id).trainable {
            continue;
        }
        for j in 0..work.get(id).len() {
            let orig = work.get(id).data[j];
            let mut fd = None;
            for (attempt, step) in STEPS.iter().enumerate() {
                work.get_mut(id).data[j] = orig + step;
                let up = work.get(id).data[j];
                let (lp, pattern_up) = loss(&work)?;
                work.get_mut(id).data[j] = orig - step;
                let down = work.get(id).data[j];
                let (lm, pattern_down) = loss(&work)?;
                work.get_mut(id).data[j] = orig;
                if pattern_up == base && pattern_down == base {
                    fd = Some((lp - lm) / (f64::from(up) - f64::from(down)));
                    report.retried += usize::from(attempt > 0);
                    break;
                }
            }
            let name = &work.get(id).name;
            let fd = fd.ok_or_else(|| Error::NonFinite {
                context: format!("{name}[{j}] sits on a rectifier kink"),
            })?;
            let analytic = grads.coord(id, j);
            let err = relative_error(fd, analytic);
            if err > report.worst_error || report.checked == 0 {
                report.worst_error = err;
                report.worst_at = format!("{name}[{j}] fd={fd:e} analytic={analytic:e}");
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Gradient check of the summed margin loss over `batch`.
pub fn check_ranker(model: &ModelParams, batch: &[BatchPair<'_>], loss_cfg: &LossConfig) -> Result<GradCheckReport> {
    let out = compute_gradients(model, batch, loss_cfg, None)?;
    let pairs: Vec<(&TokenSeq, &TokenSeq)> = batch.iter().map(|p| (p.first, p.second)).collect();
    let mut probe = model.clone();
    check(&model.store, &out.grads, |s| {
        probe.store.clone_from(s);
        let (scores, cache) = probe.forward_batch(&pairs, Mode::Train, None)?;
        let loss = scores.iter().zip(batch).map(|(sc, p)| margin_loss(*sc, p.label, loss_cfg)).sum();
        Ok((loss, cache.rectifier_pattern()))
    })
}

/// Gradient check of the mean cross-entropy over `batch`.
pub fn check_classifier(params: &ClassifierParams, batch: &[(&TokenSeq, u32)]) -> Result<GradCheckReport> {
    let (_, grads, _) = classifier_gradients(params, batch, None)?;
    let mut probe = params.clone();
    check(&params.store, &grads, |s| {
        probe.store.clone_from(s);
        let (loss, _, cache) = classifier_gradients(&probe, batch, None)?;
        Ok((loss, cache.rectifier_pattern()))
    })
}
