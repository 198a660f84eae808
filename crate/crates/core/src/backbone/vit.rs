//! Graph builders for the transformer forward pass and the evaluation
//! entry points built on top of them. Training and evaluation share the
//! same builders; evaluation simply never calls `backward`.

use ndarray::Array2;

use crate::autodiff::{DegenerateRows, Graph, NodeId};
use crate::error::{CoreError, Result};
use crate::scalar::Scalar;

use super::{ArchConfig, BlockOutput, ModelParams, PatchBatch, PatchSequence, PrototypeSet, TokenPooling};

/// Layer-norm variance epsilon.
pub(crate) const LN_EPS: f64 = 1e-5;
/// Row norms below this are treated as degenerate.
pub(crate) const NORM_EPS: f64 = 1e-12;

/// Tape handles for one model's parameters, in canonical tensor order.
pub struct VitNodes {
    /// All parameter leaves, ordered like `ModelParams::visit_tensors`.
    pub ordered: Vec<NodeId>,
    pub embed_w: NodeId,
    pub embed_b: NodeId,
    pub cls: NodeId,
    pub pos: NodeId,
    pub blocks: Vec<BlockNodeIds>,
    pub prototypes: NodeId,
    pub proj_w1: NodeId,
    pub proj_b1: NodeId,
    pub proj_w2: NodeId,
    pub proj_b2: NodeId,
}

pub struct BlockNodeIds {
    pub norm1_gamma: NodeId,
    pub norm1_beta: NodeId,
    pub wq: NodeId,
    pub bq: NodeId,
    pub wk: NodeId,
    pub bk: NodeId,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
    pub norm2_gamma: NodeId,
    pub norm2_beta: NodeId,
    pub mlp_w1: NodeId,
    pub mlp_b1: NodeId,
    pub mlp_w2: NodeId,
    pub mlp_b2: NodeId,
}

/// Outcome of a full forward pass.
pub struct ForwardPass {
    /// B^l for l = 1..=L, token matrices `(samples * seq) x dim`.
    pub block_outputs: Vec<NodeId>,
    /// Classification-token rows after the last block, `samples x dim`.
    pub features: NodeId,
}

/// Register every parameter tensor on the tape. With `trainable = false`
/// the leaves are constants (frozen source models).
pub fn bind_model<S: Scalar>(g: &mut Graph<S>, params: &ModelParams<S>, trainable: bool) -> VitNodes {
    let mut ordered = Vec::with_capacity(params.tensor_count());
    params.visit_tensors(|_, t| {
        let id = if trainable {
            g.var(t.clone())
        } else {
            g.constant(t.clone())
        };
        ordered.push(id);
    });
    VitNodes::from_ordered(ordered, params.blocks.len())
}

impl VitNodes {
    /// Assemble the named handle set from leaves already on the tape, in
    /// canonical tensor order.
    pub fn from_ordered(ordered: Vec<NodeId>, depth: usize) -> VitNodes {
        assert_eq!(ordered.len(), 4 + depth * 16 + 5);
        Self::from_ordered_inner(ordered, depth)
    }

    fn from_ordered_inner(ordered: Vec<NodeId>, l: usize) -> VitNodes {
        let mut blocks = Vec::with_capacity(l);
        for i in 0..l {
            let base = 4 + i * 16;
            blocks.push(BlockNodeIds {
                norm1_gamma: ordered[base],
                norm1_beta: ordered[base + 1],
                wq: ordered[base + 2],
                bq: ordered[base + 3],
                wk: ordered[base + 4],
                bk: ordered[base + 5],
                wv: ordered[base + 6],
                bv: ordered[base + 7],
                wo: ordered[base + 8],
                bo: ordered[base + 9],
                norm2_gamma: ordered[base + 10],
                norm2_beta: ordered[base + 11],
                mlp_w1: ordered[base + 12],
                mlp_b1: ordered[base + 13],
                mlp_w2: ordered[base + 14],
                mlp_b2: ordered[base + 15],
            });
        }
        let tail = 4 + l * 16;
        VitNodes {
            embed_w: ordered[0],
            embed_b: ordered[1],
            cls: ordered[2],
            pos: ordered[3],
            blocks,
            prototypes: ordered[tail],
            proj_w1: ordered[tail + 1],
            proj_b1: ordered[tail + 2],
            proj_w2: ordered[tail + 3],
            proj_b2: ordered[tail + 4],
            ordered,
        }
    }
}

/// Gradients for every parameter tensor in canonical order (zeros where
/// no gradient reached the leaf).
pub fn collect_grads<S: Scalar>(g: &Graph<S>, nodes: &VitNodes) -> Vec<Array2<S>> {
    nodes
        .ordered
        .iter()
        .map(|&id| match g.grad(id) {
            Some(gr) => gr.clone(),
            None => Array2::zeros(g.value(id).dim()),
        })
        .collect()
}

/// Patch pixels -> embedded token sequences B^0 (cls token prepended,
/// positional table added).
pub fn build_embed<S: Scalar>(
    g: &mut Graph<S>,
    nodes: &VitNodes,
    patches: NodeId,
    samples: usize,
) -> NodeId {
    let x = g.matmul(patches, nodes.embed_w);
    let x = g.add_row_bias(x, nodes.embed_b);
    let tok = g.assemble_tokens(x, nodes.cls, samples);
    g.add_pos_per_sample(tok, nodes.pos, samples)
}

/// All blocks from B^0: the exact recurrence
/// `Bhat^l = MSA(LN(B^{l-1})) + B^{l-1}; B^l = MLP(LN(Bhat^l)) + Bhat^l`.
pub fn build_blocks<S: Scalar>(
    g: &mut Graph<S>,
    nodes: &VitNodes,
    arch: &ArchConfig,
    b0: NodeId,
    samples: usize,
) -> ForwardPass {
    build_blocks_from(g, nodes, arch, b0, 1, samples)
}

/// Run blocks `from..=L` (1-based) on an arbitrary token node; with
/// `from = L + 1` no block runs and only features are extracted.
pub fn build_blocks_from<S: Scalar>(
    g: &mut Graph<S>,
    nodes: &VitNodes,
    arch: &ArchConfig,
    tokens: NodeId,
    from: usize,
    samples: usize,
) -> ForwardPass {
    let eps = S::cast(LN_EPS);
    let mut x = tokens;
    let mut block_outputs = Vec::new();
    for blk in nodes.blocks.iter().skip(from - 1) {
        let h = g.layer_norm(x, blk.norm1_gamma, blk.norm1_beta, eps);
        let q0 = g.matmul(h, blk.wq);
        let q = g.add_row_bias(q0, blk.bq);
        let k0 = g.matmul(h, blk.wk);
        let k = g.add_row_bias(k0, blk.bk);
        let v0 = g.matmul(h, blk.wv);
        let v = g.add_row_bias(v0, blk.bv);
        let att = g.attention(q, k, v, samples, arch.heads);
        let o0 = g.matmul(att, blk.wo);
        let o = g.add_row_bias(o0, blk.bo);
        let hat = g.add(x, o);
        let h2 = g.layer_norm(hat, blk.norm2_gamma, blk.norm2_beta, eps);
        let m0 = g.matmul(h2, blk.mlp_w1);
        let m1 = g.add_row_bias(m0, blk.mlp_b1);
        let m2 = g.gelu(m1);
        let m3 = g.matmul(m2, blk.mlp_w2);
        let m4 = g.add_row_bias(m3, blk.mlp_b2);
        x = g.add(hat, m4);
        block_outputs.push(x);
    }
    let seq = arch.seq_len();
    let cls_rows: Vec<usize> = (0..samples).map(|s| s * seq).collect();
    let features = g.gather_rows(x, cls_rows);
    ForwardPass {
        block_outputs,
        features,
    }
}

/// Reduce a block's token matrix to one row per sample.
pub fn pooled_block<S: Scalar>(
    g: &mut Graph<S>,
    block_tokens: NodeId,
    pooling: TokenPooling,
    samples: usize,
    seq: usize,
) -> NodeId {
    match pooling {
        TokenPooling::Cls => {
            let rows: Vec<usize> = (0..samples).map(|s| s * seq).collect();
            g.gather_rows(block_tokens, rows)
        }
        TokenPooling::MeanPatches => g.mean_patch_rows(block_tokens, samples, seq),
    }
}

/// Prototype-classifier logits: `P . normalize(F)`. Degenerate feature
/// rows normalize to zero, making the logits row uniform.
pub fn build_class_logits<S: Scalar>(g: &mut Graph<S>, nodes: &VitNodes, features: NodeId) -> NodeId {
    let fnorm = g.normalize_rows(features, S::cast(NORM_EPS), DegenerateRows::Zero);
    g.matmul_nt(fnorm, nodes.prototypes)
}

/// Two-layer projection head on normalized features, followed by row
/// normalization; degenerate rows emit the first basis vector. Returns
/// `(raw_head_output, unit_projections)`.
pub fn build_projection_raw<S: Scalar>(
    g: &mut Graph<S>,
    nodes: &VitNodes,
    features: NodeId,
) -> (NodeId, NodeId) {
    let fnorm = g.normalize_rows(features, S::cast(NORM_EPS), DegenerateRows::Zero);
    let p0 = g.matmul(fnorm, nodes.proj_w1);
    let p1 = g.add_row_bias(p0, nodes.proj_b1);
    let a = g.gelu(p1);
    let p2 = g.matmul(a, nodes.proj_w2);
    let p3 = g.add_row_bias(p2, nodes.proj_b2);
    let z = g.normalize_rows(p3, S::cast(NORM_EPS), DegenerateRows::FirstBasis);
    (p3, z)
}

/// Unit-norm projections only.
pub fn build_projection<S: Scalar>(g: &mut Graph<S>, nodes: &VitNodes, features: NodeId) -> NodeId {
    build_projection_raw(g, nodes, features).1
}

/// Classifier head that resumes the forward pass after a given block,
/// used when a loss perturbs latent tokens and needs fresh predictions.
pub struct BlockHead<'a> {
    pub nodes: &'a VitNodes,
    pub arch: &'a ArchConfig,
    /// 1-based index of the block that produced the latent tokens.
    pub tapped_block: usize,
    pub samples: usize,
}

impl BlockHead<'_> {
    /// Build classifier logits from a latent token node.
    pub fn logits<S: Scalar>(&self, g: &mut Graph<S>, tokens: NodeId) -> NodeId {
        let pass = build_blocks_from(
            g,
            self.nodes,
            self.arch,
            tokens,
            self.tapped_block + 1,
            self.samples,
        );
        build_class_logits(g, self.nodes, pass.features)
    }
}

fn validate_batch<S: Scalar>(params: &ModelParams<S>, batch: &PatchBatch<S>) -> Result<()> {
    if batch.data.ncols() != params.arch.patch_dim() {
        return Err(CoreError::Input(format!(
            "patch width {} does not match model patch dim {}",
            batch.data.ncols(),
            params.arch.patch_dim()
        )));
    }
    if batch.tokens != params.arch.patch_tokens() {
        return Err(CoreError::Input(format!(
            "{} patch tokens per sample, model expects {}",
            batch.tokens,
            params.arch.patch_tokens()
        )));
    }
    if batch.data.nrows() != batch.samples * batch.tokens {
        return Err(CoreError::Input("patch batch row count inconsistent".into()));
    }
    Ok(())
}

/// Embed raw patches into B^0 under the model's embedding parameters.
pub fn embed_patches<S: Scalar>(
    params: &ModelParams<S>,
    batch: &PatchBatch<S>,
) -> Result<PatchSequence<S>> {
    validate_batch(params, batch)?;
    let mut g = Graph::new();
    let nodes = bind_model(&mut g, params, false);
    let patches = g.constant(batch.data.clone());
    let b0 = build_embed(&mut g, &nodes, patches, batch.samples);
    Ok(PatchSequence {
        tokens: g.value(b0).clone(),
        samples: batch.samples,
        seq: params.arch.seq_len(),
    })
}

/// Forward pass returning the tapped block output B^l and the final
/// features F(x) (classification-token rows after block L).
pub fn forward_block_tap<S: Scalar>(
    params: &ModelParams<S>,
    sequence: &PatchSequence<S>,
    layer: usize,
) -> Result<(BlockOutput<S>, Array2<S>)> {
    let depth = params.arch.depth;
    if layer == 0 || layer > depth {
        return Err(CoreError::Config(format!(
            "layer index {layer} out of range [1, {depth}]"
        )));
    }
    if sequence.tokens.ncols() != params.arch.dim {
        return Err(CoreError::Input(format!(
            "token width {} does not match model dim {}",
            sequence.tokens.ncols(),
            params.arch.dim
        )));
    }
    if sequence.seq != params.arch.seq_len()
        || sequence.tokens.nrows() != sequence.samples * sequence.seq
    {
        return Err(CoreError::Input("token sequence shape inconsistent".into()));
    }
    let mut g = Graph::new();
    let nodes = bind_model(&mut g, params, false);
    let b0 = g.constant(sequence.tokens.clone());
    let pass = build_blocks(&mut g, &nodes, &params.arch, b0, sequence.samples);
    let tapped = BlockOutput {
        layer_index: layer,
        tokens: g.value(pass.block_outputs[layer - 1]).clone(),
        samples: sequence.samples,
        seq: sequence.seq,
    };
    Ok((tapped, g.value(pass.features).clone()))
}

/// Class probabilities `softmax(P . F(x) / ||F(x)||)` for a raw batch.
/// Rows with degenerate features come out uniform, with a warning.
pub fn classify<S: Scalar>(params: &ModelParams<S>, batch: &PatchBatch<S>) -> Result<Array2<S>> {
    validate_batch(params, batch)?;
    let mut g = Graph::new();
    let nodes = bind_model(&mut g, params, false);
    let patches = g.constant(batch.data.clone());
    let b0 = build_embed(&mut g, &nodes, patches, batch.samples);
    let pass = build_blocks(&mut g, &nodes, &params.arch, b0, batch.samples);
    let degenerate = count_degenerate_rows(g.value(pass.features));
    if degenerate > 0 {
        log::warn!("classify: {degenerate} degenerate feature rows; substituting uniform probabilities");
    }
    let logits = build_class_logits(&mut g, &nodes, pass.features);
    let probs = g.softmax_rows(logits);
    Ok(g.value(probs).clone())
}

/// Unit-norm projections `G(F(x)) / ||G(F(x))||`. Degenerate rows come
/// out as the first basis vector, with a warning.
pub fn project<S: Scalar>(params: &ModelParams<S>, batch: &PatchBatch<S>) -> Result<Array2<S>> {
    validate_batch(params, batch)?;
    let mut g = Graph::new();
    let nodes = bind_model(&mut g, params, false);
    let patches = g.constant(batch.data.clone());
    let b0 = build_embed(&mut g, &nodes, patches, batch.samples);
    let pass = build_blocks(&mut g, &nodes, &params.arch, b0, batch.samples);
    let (raw, z) = build_projection_raw(&mut g, &nodes, pass.features);
    let degenerate = count_degenerate_rows(g.value(raw));
    if degenerate > 0 {
        log::warn!("project: {degenerate} degenerate projection rows; substituting basis vector");
    }
    Ok(g.value(z).clone())
}

fn count_degenerate_rows<S: Scalar>(m: &Array2<S>) -> usize {
    let eps = S::cast(NORM_EPS);
    m.rows()
        .into_iter()
        .filter(|row| row.iter().map(|&v| v * v).sum::<S>().sqrt() < eps)
        .count()
}

/// Row-normalized copy of the prototype matrix for sharing with the
/// target client. The source model itself is unmodified.
pub fn export_prototypes<S: Scalar>(
    params: &ModelParams<S>,
    source_id: usize,
) -> Result<PrototypeSet<S>> {
    let p = &params.prototypes;
    let eps = S::cast(NORM_EPS);
    let mut vectors = Array2::zeros(p.dim());
    for (c, row) in p.rows().into_iter().enumerate() {
        let norm = row.iter().map(|&v| v * v).sum::<S>().sqrt();
        if norm < eps {
            return Err(CoreError::Input(format!(
                "prototype for class {c} is zero; an untrained class cannot guide matching"
            )));
        }
        for (j, &v) in row.iter().enumerate() {
            vectors[(c, j)] = v / norm;
        }
    }
    Ok(PrototypeSet {
        source_id,
        vectors,
        class_labels: (0..p.nrows()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{init_model, patchify};
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_arch() -> ArchConfig {
        ArchConfig {
            image_side: 8,
            patch_side: 4,
            channels: 1,
            depth: 2,
            dim: 8,
            heads: 2,
            mlp_hidden: 16,
            classes: 3,
            proj_dim: 6,
            ..ArchConfig::default()
        }
    }

    fn random_images(n: usize, width: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, width), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn residual_identity_with_zeroed_branches() {
        let arch = toy_arch();
        let mut m = init_model::<f64>(&arch, 3).unwrap();
        for blk in m.blocks.iter_mut() {
            blk.attn.wo.fill(0.0);
            blk.attn.bo.fill(0.0);
            blk.mlp.w2.fill(0.0);
            blk.mlp.b2.fill(0.0);
        }
        let images = random_images(3, 64, 5);
        let batch = patchify(&images, &arch).unwrap();
        let seq = embed_patches(&m, &batch).unwrap();
        for layer in 1..=arch.depth {
            let (tap, _) = forward_block_tap(&m, &seq, layer).unwrap();
            assert_eq!(tap.tokens, seq.tokens, "B^{layer} must equal B^0");
        }
    }

    #[test]
    fn tap_at_last_layer_matches_features() {
        let arch = toy_arch();
        let m = init_model::<f64>(&arch, 4).unwrap();
        let images = random_images(2, 64, 6);
        let batch = patchify(&images, &arch).unwrap();
        let seq = embed_patches(&m, &batch).unwrap();
        let (tap, features) = forward_block_tap(&m, &seq, arch.depth).unwrap();
        for s in 0..2 {
            let cls_row = tap.tokens.row(s * seq.seq);
            for j in 0..arch.dim {
                assert_eq!(cls_row[j], features[(s, j)]);
            }
        }
    }

    #[test]
    fn tap_layer_out_of_range_is_config_error() {
        let arch = toy_arch();
        let m = init_model::<f64>(&arch, 4).unwrap();
        let images = random_images(1, 64, 6);
        let batch = patchify(&images, &arch).unwrap();
        let seq = embed_patches(&m, &batch).unwrap();
        assert!(matches!(
            forward_block_tap(&m, &seq, 0),
            Err(CoreError::Config(_))
        ));
        assert!(matches!(
            forward_block_tap(&m, &seq, arch.depth + 1),
            Err(CoreError::Config(_))
        ));
    }

    #[test]
    fn classify_rows_sum_to_one() {
        let arch = toy_arch();
        let m = init_model::<f64>(&arch, 7).unwrap();
        let images = random_images(4, 64, 8);
        let batch = patchify(&images, &arch).unwrap();
        let probs = classify(&m, &batch).unwrap();
        assert_eq!(probs.dim(), (4, 3));
        for row in probs.rows() {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            for &p in row.iter() {
                assert!(p > 0.0 && p < 1.0);
            }
        }
    }

    #[test]
    fn classify_with_zero_prototypes_is_uniform() {
        let arch = toy_arch();
        let mut m = init_model::<f64>(&arch, 7).unwrap();
        m.prototypes.fill(0.0);
        let images = random_images(2, 64, 9);
        let batch = patchify(&images, &arch).unwrap();
        let probs = classify(&m, &batch).unwrap();
        for &p in probs.iter() {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn project_rows_are_unit_and_deterministic() {
        let arch = toy_arch();
        let m = init_model::<f64>(&arch, 11).unwrap();
        let mut images = random_images(3, 64, 12);
        // two identical inputs
        let row0 = images.row(0).to_owned();
        images.row_mut(1).assign(&row0);
        let batch = patchify(&images, &arch).unwrap();
        let z = project(&m, &batch).unwrap();
        assert_eq!(z.ncols(), arch.proj_dim);
        for row in z.rows() {
            let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }
        assert_eq!(z.row(0), z.row(1));
    }

    #[test]
    fn export_prototypes_normalizes_and_preserves() {
        let arch = toy_arch();
        let mut m = init_model::<f64>(&arch, 13).unwrap();
        m.prototypes.row_mut(0).mapv_inplace(|v| v * 17.0);
        let before = m.prototypes.clone();
        let set = export_prototypes(&m, 2).unwrap();
        assert_eq!(set.source_id, 2);
        assert_eq!(set.vectors.dim(), (3, 8));
        assert_eq!(set.class_labels, vec![0, 1, 2]);
        for row in set.vectors.rows() {
            let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
        }
        assert_eq!(m.prototypes, before);
        let again = export_prototypes(&m, 2).unwrap();
        assert_eq!(set.vectors, again.vectors);
    }

    #[test]
    fn export_prototypes_rejects_zero_row() {
        let arch = toy_arch();
        let mut m = init_model::<f64>(&arch, 13).unwrap();
        m.prototypes.row_mut(1).fill(0.0);
        let err = export_prototypes(&m, 0).unwrap_err();
        assert!(err.to_string().contains("class 1"));
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        // 2-block, d=8 toy instance; every parameter group receives
        // gradient through a loss touching classifier and projector.
        let arch = toy_arch();
        let m = init_model::<f64>(&arch, 31).unwrap();
        let images = random_images(2, 64, 32);
        let batch = patchify(&images, &arch).unwrap();

        let mut tensors = Vec::new();
        m.visit_tensors(|_, t| tensors.push(t.clone()));
        let depth = arch.depth;
        let n = batch.samples;
        let labels = ndarray::array![[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        let probe = Array2::from_shape_fn((n, arch.proj_dim), |(i, j)| {
            0.1 * ((i * 7 + j * 3) as f64).sin()
        });
        let data = batch.data.clone();
        let arch2 = arch.clone();
        let build = move |g: &mut crate::autodiff::Graph<f64>, ids: &[crate::autodiff::NodeId]| {
            let nodes = VitNodes::from_ordered(ids.to_vec(), depth);
            let patches = g.constant(data.clone());
            let b0 = build_embed(g, &nodes, patches, n);
            let pass = build_blocks(g, &nodes, &arch2, b0, n);
            let logits = build_class_logits(g, &nodes, pass.features);
            let logp = g.log_softmax_rows(logits);
            let ce_mask = labels.mapv(|v| -v / n as f64);
            let ce = g.mask_sum(logp, ce_mask);
            let z = build_projection(g, &nodes, pass.features);
            let zterm = g.mask_sum(z, probe.clone());
            g.add(ce, zterm)
        };
        let report =
            crate::autodiff::check_gradients(&build, &tensors, crate::autodiff::DEFAULT_EPS, 1e-4, 1e-8)
                .unwrap();
        assert!(report.max_rel_err <= 1.0);
    }

    #[test]
    fn permutation_equivariance_of_patch_tokens() {
        // with positional embeddings zeroed, permuting patch tokens
        // permutes the corresponding rows of B^l (cls row fixed)
        let arch = toy_arch();
        let mut m = init_model::<f64>(&arch, 21).unwrap();
        m.embed.pos.fill(0.0);
        let images = random_images(1, 64, 22);
        let batch = patchify(&images, &arch).unwrap();
        let seq = embed_patches(&m, &batch).unwrap();

        // swap patch tokens 1 and 3 (rows 2 and 4 of the sequence)
        let mut permuted = seq.clone();
        let a = permuted.tokens.row(2).to_owned();
        let b = permuted.tokens.row(4).to_owned();
        permuted.tokens.row_mut(2).assign(&b);
        permuted.tokens.row_mut(4).assign(&a);

        for layer in 1..=arch.depth {
            let (t1, _) = forward_block_tap(&m, &seq, layer).unwrap();
            let (t2, _) = forward_block_tap(&m, &permuted, layer).unwrap();
            for (r1, r2) in [(0usize, 0usize), (1, 1), (2, 4), (3, 3), (4, 2)] {
                let orig = t1.tokens.row(r1);
                let perm = t2.tokens.row(r2);
                for j in 0..arch.dim {
                    assert!(
                        (orig[j] - perm[j]).abs() < 1e-12,
                        "layer {layer} row {r1} vs permuted {r2}"
                    );
                }
            }
        }
    }
}
