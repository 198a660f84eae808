//! Tape builders for every objective. These are the single source of
//! truth for the loss arithmetic; the value APIs in the parent module and
//! the training loops both go through them.

use ndarray::Array2;

use crate::autodiff::{DegenerateRows, Graph, NodeId};
use crate::error::{CoreError, Result};
use crate::scalar::Scalar;

use super::LOG_FLOOR;

/// `-1/N * sum_i sum_c labels[i,c] * log(clamp(probs[i,c]))`.
pub fn ce_from_probs<S: Scalar>(g: &mut Graph<S>, probs: NodeId, labels: &Array2<S>) -> NodeId {
    let n = labels.nrows();
    let mask = labels.mapv(|v| v * S::cast(-1.0 / n as f64));
    let clamped = g.clamp_min(probs, S::cast(LOG_FLOOR));
    let logp = g.ln(clamped);
    g.mask_sum(logp, mask)
}

/// Cross-entropy over an index-selected subset of rows; each `(row,
/// class)` pair contributes `-log(clamp(p))/|subset|`.
pub fn ce_from_probs_indexed<S: Scalar>(
    g: &mut Graph<S>,
    probs: NodeId,
    covered: &[(usize, usize)],
    classes: usize,
) -> NodeId {
    let n = g.value(probs).nrows();
    let mut mask = Array2::zeros((n, classes));
    let w = S::cast(-1.0 / covered.len() as f64);
    for &(row, class) in covered {
        mask[(row, class)] += w;
    }
    let clamped = g.clamp_min(probs, S::cast(LOG_FLOOR));
    let logp = g.ln(clamped);
    g.mask_sum(logp, mask)
}

/// Cross-entropy straight from logits through a stable log-softmax.
/// `weights[i][c]` is the (nonnegative) target weight; the result is
/// `-sum_ic weights[i,c] * log_softmax(logits)[i,c]`.
pub fn ce_from_logits<S: Scalar>(g: &mut Graph<S>, logits: NodeId, weights: Array2<S>) -> NodeId {
    let logp = g.log_softmax_rows(logits);
    let mask = weights.mapv(|v| -v);
    g.mask_sum(logp, mask)
}

/// Domain-augmented contrastive loss. For every anchor i and source k the
/// positive is that source's view of sample i; the denominator ranges
/// over the source-k views of every batch sample (positive included).
/// Contributions are averaged over anchors and summed over sources.
pub fn domain_aug<S: Scalar>(
    g: &mut Graph<S>,
    anchors: NodeId,
    positives: &[Array2<S>],
    temperature: S,
) -> NodeId {
    let n = g.value(anchors).nrows();
    let inv_tau = S::one() / temperature;
    let mut diag = Array2::zeros((n, n));
    for i in 0..n {
        diag[(i, i)] = S::cast(-1.0 / n as f64);
    }
    let mut total: Option<NodeId> = None;
    for views in positives {
        let pos = g.constant(views.clone());
        let sims = g.matmul_nt(anchors, pos);
        let logits = g.scale(sims, inv_tau);
        let logp = g.log_softmax_rows(logits);
        let term = g.mask_sum(logp, diag.clone());
        total = Some(match total {
            Some(t) => g.add(t, term),
            None => term,
        });
    }
    total.expect("at least one source view")
}

/// Same loss with anchors produced inside the graph (training path):
/// anchors are row-normalized first.
pub fn domain_aug_from_raw<S: Scalar>(
    g: &mut Graph<S>,
    raw_anchors: NodeId,
    positives: &[Array2<S>],
    temperature: S,
) -> NodeId {
    let anchors = g.normalize_rows(raw_anchors, S::cast(1e-12), DegenerateRows::Zero);
    domain_aug(g, anchors, positives, temperature)
}

/// Cross-domain semantic matching. For sample i with pseudo class c, the
/// positives are all prototypes of class c; each positive's denominator
/// is itself plus every other-class prototype. Samples without a
/// same-class prototype are skipped and counted.
///
/// Returns the loss node and the skip count; errors if every sample was
/// skipped.
pub fn semantic_matching<S: Scalar>(
    g: &mut Graph<S>,
    projections: NodeId,
    prototypes: NodeId,
    pseudo_labels: &[usize],
    prototype_classes: &[usize],
    temperature: S,
) -> Result<(NodeId, usize)> {
    let n = g.value(projections).nrows();
    let m = g.value(prototypes).nrows();
    assert_eq!(pseudo_labels.len(), n);
    assert_eq!(prototype_classes.len(), m);

    let mut neg_mask = Array2::zeros((n, m));
    let mut pos_weight = Array2::zeros((n, m));
    let mut valid_rows = Vec::new();
    for (i, &label) in pseudo_labels.iter().enumerate() {
        let positives: Vec<usize> = prototype_classes
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == label)
            .map(|(j, _)| j)
            .collect();
        if positives.is_empty() {
            continue;
        }
        valid_rows.push((i, positives));
        for (j, &c) in prototype_classes.iter().enumerate() {
            if c != label {
                neg_mask[(i, j)] = S::one();
            }
        }
    }
    let skipped = n - valid_rows.len();
    if valid_rows.is_empty() {
        return Err(CoreError::Input("no matchable prototypes".into()));
    }
    let inv_n = 1.0 / valid_rows.len() as f64;
    for (i, positives) in &valid_rows {
        let w = S::cast(inv_n / positives.len() as f64);
        for &j in positives {
            pos_weight[(*i, j)] = w;
        }
    }

    let sims0 = g.matmul_nt(projections, prototypes);
    let sims = g.scale(sims0, S::one() / temperature);
    let expd = g.exp(sims);
    let neg_mask_node = g.constant(neg_mask);
    let masked = g.mul(expd, neg_mask_node);
    let negsum = g.row_sum(masked);
    let denom = g.add_col_vec(expd, negsum);
    let ln_denom = g.ln(denom);
    let term = g.sub(sims, ln_denom);
    let picked = g.mask_sum(term, pos_weight);
    let loss = g.scale(picked, S::cast(-1.0));
    Ok((loss, skipped))
}

/// Forward KL `mean_i sum_c p[i,c] * log(clamp(p)/clamp(q))` between two
/// probability nodes.
pub fn forward_kl<S: Scalar>(g: &mut Graph<S>, p: NodeId, q: NodeId) -> NodeId {
    let n = g.value(p).nrows();
    let floor = S::cast(LOG_FLOOR);
    let pc = g.clamp_min(p, floor);
    let qc = g.clamp_min(q, floor);
    let lp = g.ln(pc);
    let lq = g.ln(qc);
    let diff = g.sub(lp, lq);
    let prod = g.mul(p, diff);
    let total = g.sum_all(prod);
    g.scale(total, S::cast(1.0 / n as f64))
}

/// Latent offset `b = b_x + alpha * stopgrad(b_x - b_xr)`, predictions
/// under `head` for both the original and offset tokens, and the forward
/// KL between them.
pub fn random_offset_kl<S: Scalar>(
    g: &mut Graph<S>,
    b_x: NodeId,
    b_xr: NodeId,
    alpha: S,
    samples: usize,
    head: &mut dyn FnMut(&mut Graph<S>, NodeId) -> NodeId,
) -> NodeId {
    assert_eq!(g.value(b_x).dim(), g.value(b_xr).dim(), "latent shape mismatch");
    let diff = g.sub(b_x, b_xr);
    let frozen = g.detach(diff);
    let offset = g.scale(frozen, alpha);
    let shifted = g.add(b_x, offset);
    let logits_p = head(g, b_x);
    let p = g.softmax_rows(logits_p);
    let logits_q = head(g, shifted);
    let q = g.softmax_rows(logits_q);
    debug_assert_eq!(g.value(p).nrows(), samples);
    forward_kl(g, p, q)
}
