//! Training objectives: source cross-entropy, the domain-augmented
//! contrastive loss on block activations, pseudo-label cross-entropy,
//! cross-domain semantic matching against source prototypes, the combined
//! objective, and the two comparison augmentations (mixup and
//! random-offset KL).
//!
//! Every loss exists once, as a tape builder in [`build`]; the value
//! functions here wrap those builders with input validation and evaluate
//! them on a scratch tape. Training code drives the builders directly so
//! gradients flow through the identical arithmetic.

pub mod augment;
pub mod build;

pub use augment::{mixup_blend, mixup_blend_with_lambda, random_offset_kl_loss, soft_target_ce, MixedBatch};

use ndarray::Array2;

use crate::autodiff::Graph;
use crate::error::{CoreError, Result};
use crate::pseudo::PseudoLabelSet;
use crate::scalar::Scalar;

/// Probability floor applied wherever a log of a model probability is
/// taken.
pub const LOG_FLOOR: f64 = 1e-12;

/// Anchor/positive views for the domain-level contrastive loss. Anchors
/// are the target model's pooled block features; `positives[k]` holds the
/// k-th source model's pooled features for the same samples. All rows
/// unit-norm.
#[derive(Clone, Debug)]
pub struct ContrastiveBatch<S: Scalar> {
    pub anchors: Array2<S>,
    pub positives: Vec<Array2<S>>,
    pub temperature: S,
}

/// Projections and stacked source prototypes for semantic matching. The
/// prototype matrix must live in the same space as the projections;
/// resolving a width mismatch (mapping prototypes through the projector)
/// is the caller's job.
#[derive(Clone, Debug)]
pub struct SemanticBatch<S: Scalar> {
    /// Unit-norm projections, one row per pseudo-labeled sample.
    pub projections: Array2<S>,
    /// Pseudo class of each projection row.
    pub pseudo_labels: Vec<usize>,
    /// Stacked unit-norm prototype vectors from all sources.
    pub prototypes: Array2<S>,
    /// Class of each prototype row.
    pub prototype_classes: Vec<usize>,
}

/// Weights of the combined objective.
#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    pub lambda_da: f64,
    pub lambda_sm: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_da", self.lambda_da), ("lambda_sm", self.lambda_sm)] {
            if !v.is_finite() || v < 0.0 {
                return Err(CoreError::Config(format!(
                    "{name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Pseudo-label cross-entropy outcome; `warned_empty` flags a batch with
/// no covered samples (loss 0 by decision).
#[derive(Clone, Copy, Debug)]
pub struct PseudoCe<S: Scalar> {
    pub value: S,
    pub warned_empty: bool,
}

/// Semantic-matching outcome; `skipped` counts samples with no
/// same-class prototype.
#[derive(Clone, Copy, Debug)]
pub struct SemanticMatch<S: Scalar> {
    pub value: S,
    pub skipped: usize,
}

fn check_unit_rows<S: Scalar>(m: &Array2<S>, what: &str) -> Result<()> {
    for (i, row) in m.rows().into_iter().enumerate() {
        let norm = row.iter().map(|&v| v * v).sum::<S>().sqrt().to_f64_lossy();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(CoreError::Input(format!(
                "{what} row {i} has norm {norm}, expected unit"
            )));
        }
    }
    Ok(())
}

/// Mean cross-entropy between one-hot labels and probability rows.
pub fn source_ce_loss<S: Scalar>(probabilities: &Array2<S>, labels: &Array2<S>) -> Result<S> {
    if probabilities.dim() != labels.dim() {
        return Err(CoreError::Input(format!(
            "probabilities {:?} vs labels {:?}",
            probabilities.dim(),
            labels.dim()
        )));
    }
    for (i, row) in probabilities.rows().into_iter().enumerate() {
        let sum: f64 = row.iter().map(|v| v.to_f64_lossy()).sum();
        if (sum - 1.0).abs() > 1e-4 {
            return Err(CoreError::Input(format!(
                "probability row {i} sums to {sum}, expected 1"
            )));
        }
    }
    let mut g = Graph::new();
    let p = g.constant(probabilities.clone());
    let loss = build::ce_from_probs(&mut g, p, labels);
    Ok(g.scalar(loss))
}

/// Domain-augmented contrastive loss over pooled block activations.
pub fn domain_aug_loss<S: Scalar>(batch: &ContrastiveBatch<S>) -> Result<S> {
    let n = batch.anchors.nrows();
    if n < 2 {
        return Err(CoreError::Input(
            "contrastive batch needs at least 2 samples (no negatives otherwise)".into(),
        ));
    }
    if batch.positives.is_empty() {
        return Err(CoreError::Input("no source views provided".into()));
    }
    if batch.temperature <= S::zero() {
        return Err(CoreError::Config(format!(
            "temperature must be positive, got {}",
            batch.temperature
        )));
    }
    check_unit_rows(&batch.anchors, "anchor")?;
    for (k, p) in batch.positives.iter().enumerate() {
        if p.dim() != batch.anchors.dim() {
            return Err(CoreError::Input(format!(
                "source {k} views {:?} do not match anchors {:?}",
                p.dim(),
                batch.anchors.dim()
            )));
        }
        check_unit_rows(p, &format!("source {k} view"))?;
    }
    let mut g = Graph::new();
    let anchors = g.constant(batch.anchors.clone());
    let loss = build::domain_aug(&mut g, anchors, &batch.positives, batch.temperature);
    Ok(g.scalar(loss))
}

/// Mean cross-entropy over the pseudo-labeled subset of a batch.
pub fn pseudo_label_loss<S: Scalar>(
    probabilities: &Array2<S>,
    pseudo: &PseudoLabelSet,
) -> Result<PseudoCe<S>> {
    let (n, classes) = probabilities.dim();
    let mut covered = Vec::new();
    for e in &pseudo.entries {
        if e.class_id >= classes {
            return Err(CoreError::Input(format!(
                "pseudo label class {} out of range [0, {classes})",
                e.class_id
            )));
        }
        if e.sample_index >= n {
            return Err(CoreError::Input(format!(
                "pseudo label sample index {} outside batch of {n}",
                e.sample_index
            )));
        }
        covered.push((e.sample_index, e.class_id));
    }
    if covered.is_empty() {
        log::warn!("pseudo_label_loss: empty covered subset, contributing 0");
        return Ok(PseudoCe {
            value: S::zero(),
            warned_empty: true,
        });
    }
    let mut g = Graph::new();
    let p = g.constant(probabilities.clone());
    let loss = build::ce_from_probs_indexed(&mut g, p, &covered, classes);
    Ok(PseudoCe {
        value: g.scalar(loss),
        warned_empty: false,
    })
}

/// Cross-domain semantic matching loss (temperature-free form).
pub fn semantic_matching_loss<S: Scalar>(batch: &SemanticBatch<S>) -> Result<SemanticMatch<S>> {
    semantic_matching_loss_with_temperature(batch, 1.0)
}

/// Semantic matching with an optional temperature on the inner products.
pub fn semantic_matching_loss_with_temperature<S: Scalar>(
    batch: &SemanticBatch<S>,
    temperature: f64,
) -> Result<SemanticMatch<S>> {
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(CoreError::Config(format!(
            "semantic temperature must be positive, got {temperature}"
        )));
    }
    let n = batch.projections.nrows();
    let m = batch.prototypes.nrows();
    if batch.pseudo_labels.len() != n {
        return Err(CoreError::Input(format!(
            "{} pseudo labels for {n} projections",
            batch.pseudo_labels.len()
        )));
    }
    if batch.prototype_classes.len() != m {
        return Err(CoreError::Input(format!(
            "{} class labels for {m} prototypes",
            batch.prototype_classes.len()
        )));
    }
    if batch.projections.ncols() != batch.prototypes.ncols() {
        return Err(CoreError::Input(format!(
            "projection width {} vs prototype width {}; map prototypes into the projection space first",
            batch.projections.ncols(),
            batch.prototypes.ncols()
        )));
    }
    check_unit_rows(&batch.projections, "projection")?;
    check_unit_rows(&batch.prototypes, "prototype")?;

    let mut g = Graph::new();
    let z = g.constant(batch.projections.clone());
    let protos = g.constant(batch.prototypes.clone());
    let (loss, skipped) = build::semantic_matching(
        &mut g,
        z,
        protos,
        &batch.pseudo_labels,
        &batch.prototype_classes,
        S::cast(temperature),
    )?;
    Ok(SemanticMatch {
        value: g.scalar(loss),
        skipped,
    })
}

/// Combined objective `lambda_da * l_da + lambda_sm * l_sm + l_t`.
pub fn total_objective<S: Scalar>(l_da: S, l_sm: S, l_t: S, w: &LossWeights) -> Result<S> {
    w.validate()?;
    for (name, v) in [("l_da", l_da), ("l_sm", l_sm), ("l_t", l_t)] {
        if !v.is_finite() {
            return Err(CoreError::Input(format!("{name} is not finite")));
        }
    }
    Ok(S::cast(w.lambda_da) * l_da + S::cast(w.lambda_sm) * l_sm + l_t)
}

#[cfg(test)]
mod tests;
