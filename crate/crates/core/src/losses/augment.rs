//! Comparison augmentations that can replace the domain-contrastive term
//! in the combined objective: sample mixing with a Beta-drawn weight, and
//! a random latent offset penalized by forward KL.

use ndarray::Array2;
use rand::RngCore;
use rand_distr::{Beta, Distribution};

use crate::autodiff::{Graph, NodeId};
use crate::error::{CoreError, Result};
use crate::scalar::Scalar;

use super::{build, LOG_FLOOR};

/// A blended batch `x = lam * x_i + (1 - lam) * x_j` with soft targets
/// blended the same way.
#[derive(Clone, Debug)]
pub struct MixedBatch<S: Scalar> {
    pub inputs: Array2<S>,
    pub targets: Array2<S>,
    pub lambda: f64,
}

/// Blend two aligned batches with `lambda ~ Beta(beta, beta)`.
/// `targets_*` are the model's probability predictions for each side.
pub fn mixup_blend<S: Scalar>(
    x_i: &Array2<S>,
    x_j: &Array2<S>,
    y_i: &Array2<S>,
    y_j: &Array2<S>,
    beta: f64,
    rng: &mut dyn RngCore,
) -> Result<MixedBatch<S>> {
    if beta <= 0.0 || !beta.is_finite() {
        return Err(CoreError::Config(format!(
            "mixup beta must be positive, got {beta}"
        )));
    }
    let dist = Beta::new(beta, beta)
        .map_err(|e| CoreError::Config(format!("invalid beta parameter: {e}")))?;
    let lambda = dist.sample(rng);
    mixup_blend_with_lambda(x_i, x_j, y_i, y_j, lambda)
}

/// Blend with a caller-fixed lambda (tests, reproductions).
pub fn mixup_blend_with_lambda<S: Scalar>(
    x_i: &Array2<S>,
    x_j: &Array2<S>,
    y_i: &Array2<S>,
    y_j: &Array2<S>,
    lambda: f64,
) -> Result<MixedBatch<S>> {
    if x_i.dim() != x_j.dim() || y_i.dim() != y_j.dim() {
        return Err(CoreError::Input("mixup operands must be aligned".into()));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(CoreError::Input(format!("lambda {lambda} outside [0, 1]")));
    }
    let l = S::cast(lambda);
    let r = S::cast(1.0 - lambda);
    let inputs = x_i.mapv(|v| v * l) + &x_j.mapv(|v| v * r);
    let targets = y_i.mapv(|v| v * l) + &y_j.mapv(|v| v * r);
    Ok(MixedBatch {
        inputs,
        targets,
        lambda,
    })
}

/// `-mean_i sum_c targets[i,c] * log(clamp(predictions[i,c]))`: the loss
/// hook applied to the model's predictions on a mixed batch.
pub fn soft_target_ce<S: Scalar>(predictions: &Array2<S>, targets: &Array2<S>) -> Result<S> {
    if predictions.dim() != targets.dim() {
        return Err(CoreError::Input(format!(
            "predictions {:?} vs targets {:?}",
            predictions.dim(),
            targets.dim()
        )));
    }
    let n = predictions.nrows();
    let floor = S::cast(LOG_FLOOR);
    let mut total = S::zero();
    for (prow, trow) in predictions.rows().into_iter().zip(targets.rows()) {
        for (&p, &t) in prow.iter().zip(trow.iter()) {
            total -= t * p.max(floor).ln();
        }
    }
    Ok(total / S::cast(n as f64))
}

/// Forward-KL penalty between predictions on original latent tokens and
/// on tokens shifted by `alpha * stopgrad(b_x - b_xr)`. The `head` builds
/// classifier logits from a latent token node; per-sample predictions
/// must come out one row per sample.
pub fn random_offset_kl_loss<S: Scalar>(
    b_x: &Array2<S>,
    b_xr: &Array2<S>,
    alpha: f64,
    samples: usize,
    head: &mut dyn FnMut(&mut Graph<S>, NodeId) -> NodeId,
) -> Result<S> {
    if b_x.dim() != b_xr.dim() {
        return Err(CoreError::Input(format!(
            "latent batches must share a shape: {:?} vs {:?}",
            b_x.dim(),
            b_xr.dim()
        )));
    }
    if !alpha.is_finite() {
        return Err(CoreError::Config(format!("offset alpha {alpha} not finite")));
    }
    let mut g = Graph::new();
    let bx = g.constant(b_x.clone());
    let bxr = g.constant(b_xr.clone());
    let loss = build::random_offset_kl(&mut g, bx, bxr, S::cast(alpha), samples, head);
    Ok(g.scalar(loss))
}
