//! Finite-difference verification of the analytic gradients.

use crate::error::Result;
use crate::nn::model::{batch_gradients, batch_loss, LossWeights, ParameterSet, SeqExample};

/// Compare every analytic gradient against the central difference
/// (L(p+eps) - L(p-eps)) / 2eps and return the worst relative error,
/// |a - n| / max(|a| + |n|, 1e-6).
///
/// Only feasible for small models (every parameter is perturbed twice);
/// callers should keep the parameter count below ~1e4.
pub fn finite_difference_check(
    params: &ParameterSet,
    batch: &[SeqExample],
    weights: &LossWeights,
    epsilon: f64,
) -> Result<f64> {
    let (analytic, _) = batch_gradients(params, batch, weights)?;
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for i in 0..probe.values.len() {
        let orig = probe.values[i];
        probe.values[i] = orig + epsilon;
        let lp = batch_loss(&probe, batch, weights)?.total;
        probe.values[i] = orig - epsilon;
        let lm = batch_loss(&probe, batch, weights)?.total;
        probe.values[i] = orig;
        let numeric = (lp - lm) / (2.0 * epsilon);
        let denom = (analytic[i].abs() + numeric.abs()).max(1e-6);
        let rel = (analytic[i] - numeric).abs() / denom;
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}

/// Same check with one analytic gradient deliberately corrupted; used to
/// prove the detector actually detects.
pub fn finite_difference_check_with_fault(
    params: &ParameterSet,
    batch: &[SeqExample],
    weights: &LossWeights,
    epsilon: f64,
    fault_index: usize,
) -> Result<f64> {
    let (mut analytic, _) = batch_gradients(params, batch, weights)?;
    analytic[fault_index] *= 2.0;
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for i in 0..probe.values.len() {
        let orig = probe.values[i];
        probe.values[i] = orig + epsilon;
        let lp = batch_loss(&probe, batch, weights)?.total;
        probe.values[i] = orig - epsilon;
        let lm = batch_loss(&probe, batch, weights)?.total;
        probe.values[i] = orig;
        let numeric = (lp - lm) / (2.0 * epsilon);
        let denom = (analytic[i].abs() + numeric.abs()).max(1e-6);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(worst)
}
