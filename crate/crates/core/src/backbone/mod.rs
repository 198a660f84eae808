//! Compact transformer encoder with per-block output taps, a normalized
//! prototype classifier head, and a two-layer projection head. One
//! instance of [`ModelParams`] is the full trainable state of a client.

mod checkpoint;
mod vit;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, serialize_params, serialize_prototypes, CHECKPOINT_SCHEMA_VERSION,
};
pub use vit::{
    bind_model, build_blocks, build_blocks_from, build_class_logits, build_embed,
    build_projection, build_projection_raw, classify, collect_grads, embed_patches,
    export_prototypes, forward_block_tap, pooled_block, project, BlockHead, ForwardPass,
    VitNodes,
};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::scalar::Scalar;

/// MLP-block activation. Recorded in the architecture config so runs are
/// reproducible from the checkpoint header alone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    /// Tanh approximation of the Gaussian error linear unit.
    GeluTanh,
}

/// How a block's token matrix is reduced to one vector per sample for the
/// contrastive objectives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenPooling {
    /// Use the classification-token row.
    Cls,
    /// Mean over the patch-token rows.
    MeanPatches,
}

/// Architecture hyper-parameters shared by every client in a federation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub image_side: usize,
    pub patch_side: usize,
    pub channels: usize,
    /// Number of transformer blocks L.
    pub depth: usize,
    /// Token width d (also the feature width d_f).
    pub dim: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    /// Label-space size C.
    pub classes: usize,
    /// Projection-head output width d_z.
    pub proj_dim: usize,
    pub activation: Activation,
    pub pooling: TokenPooling,
}

impl Default for ArchConfig {
    /// Desk-scale profile: 4 blocks, width 64, 4 heads, 16x16 inputs cut
    /// into 4x4 patches.
    fn default() -> Self {
        ArchConfig {
            image_side: 16,
            patch_side: 4,
            channels: 1,
            depth: 4,
            dim: 64,
            heads: 4,
            mlp_hidden: 128,
            classes: 5,
            proj_dim: 128,
            activation: Activation::GeluTanh,
            pooling: TokenPooling::Cls,
        }
    }
}

impl ArchConfig {
    /// Patch tokens per sample, T = (image_side / patch_side)^2.
    pub fn patch_tokens(&self) -> usize {
        let per_side = self.image_side / self.patch_side;
        per_side * per_side
    }

    /// Sequence length T + 1 (classification token prepended).
    pub fn seq_len(&self) -> usize {
        self.patch_tokens() + 1
    }

    /// Flattened pixels per patch.
    pub fn patch_dim(&self) -> usize {
        self.patch_side * self.patch_side * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_side == 0 || self.image_side % self.patch_side != 0 {
            return Err(CoreError::Config(format!(
                "image side {} not divisible by patch side {}",
                self.image_side, self.patch_side
            )));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(CoreError::Config(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.depth == 0 {
            return Err(CoreError::Config("depth must be at least 1".into()));
        }
        if self.classes < 2 {
            return Err(CoreError::Config("need at least 2 classes".into()));
        }
        if self.channels == 0 || self.mlp_hidden == 0 || self.proj_dim == 0 {
            return Err(CoreError::Config("zero-sized architecture field".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams<S: Scalar> {
    pub gamma: Array2<S>,
    pub beta: Array2<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<S: Scalar> {
    pub wq: Array2<S>,
    pub bq: Array2<S>,
    pub wk: Array2<S>,
    pub bk: Array2<S>,
    pub wv: Array2<S>,
    pub bv: Array2<S>,
    pub wo: Array2<S>,
    pub bo: Array2<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams<S: Scalar> {
    pub w1: Array2<S>,
    pub b1: Array2<S>,
    pub w2: Array2<S>,
    pub b2: Array2<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<S: Scalar> {
    pub norm1: LayerNormParams<S>,
    pub attn: AttentionParams<S>,
    pub norm2: LayerNormParams<S>,
    pub mlp: MlpParams<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbedParams<S: Scalar> {
    /// Patch projection, patch_dim x dim.
    pub w: Array2<S>,
    pub b: Array2<S>,
    /// Learned classification token, 1 x dim.
    pub cls: Array2<S>,
    /// Positional table, seq_len x dim.
    pub pos: Array2<S>,
}

/// Full parameter set of one client's model: extractor (embedding plus
/// all blocks), prototype matrix P (classes x dim), and projection head.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<S: Scalar> {
    pub arch: ArchConfig,
    pub embed: EmbedParams<S>,
    pub blocks: Vec<BlockParams<S>>,
    pub prototypes: Array2<S>,
    pub projector: MlpParams<S>,
}

impl<S: Scalar> ModelParams<S> {
    /// Visit every tensor in the canonical order used for aggregation,
    /// serialization, and gradient collection.
    pub fn visit_tensors(&self, mut f: impl FnMut(&str, &Array2<S>)) {
        f("embed.w", &self.embed.w);
        f("embed.b", &self.embed.b);
        f("embed.cls", &self.embed.cls);
        f("embed.pos", &self.embed.pos);
        for (i, blk) in self.blocks.iter().enumerate() {
            let p = |suffix: &str| format!("block{i}.{suffix}");
            f(&p("norm1.gamma"), &blk.norm1.gamma);
            f(&p("norm1.beta"), &blk.norm1.beta);
            f(&p("attn.wq"), &blk.attn.wq);
            f(&p("attn.bq"), &blk.attn.bq);
            f(&p("attn.wk"), &blk.attn.wk);
            f(&p("attn.bk"), &blk.attn.bk);
            f(&p("attn.wv"), &blk.attn.wv);
            f(&p("attn.bv"), &blk.attn.bv);
            f(&p("attn.wo"), &blk.attn.wo);
            f(&p("attn.bo"), &blk.attn.bo);
            f(&p("norm2.gamma"), &blk.norm2.gamma);
            f(&p("norm2.beta"), &blk.norm2.beta);
            f(&p("mlp.w1"), &blk.mlp.w1);
            f(&p("mlp.b1"), &blk.mlp.b1);
            f(&p("mlp.w2"), &blk.mlp.w2);
            f(&p("mlp.b2"), &blk.mlp.b2);
        }
        f("prototypes", &self.prototypes);
        f("proj.w1", &self.projector.w1);
        f("proj.b1", &self.projector.b1);
        f("proj.w2", &self.projector.w2);
        f("proj.b2", &self.projector.b2);
    }

    /// Mutable visit in the same canonical order; `idx` counts tensors.
    pub fn visit_tensors_mut(&mut self, mut f: impl FnMut(usize, &mut Array2<S>)) {
        let mut idx = 0;
        {
            let mut call = |t: &mut Array2<S>| {
                f(idx, t);
                idx += 1;
            };
            call(&mut self.embed.w);
            call(&mut self.embed.b);
            call(&mut self.embed.cls);
            call(&mut self.embed.pos);
            for blk in self.blocks.iter_mut() {
                call(&mut blk.norm1.gamma);
                call(&mut blk.norm1.beta);
                call(&mut blk.attn.wq);
                call(&mut blk.attn.bq);
                call(&mut blk.attn.wk);
                call(&mut blk.attn.bk);
                call(&mut blk.attn.wv);
                call(&mut blk.attn.bv);
                call(&mut blk.attn.wo);
                call(&mut blk.attn.bo);
                call(&mut blk.norm2.gamma);
                call(&mut blk.norm2.beta);
                call(&mut blk.mlp.w1);
                call(&mut blk.mlp.b1);
                call(&mut blk.mlp.w2);
                call(&mut blk.mlp.b2);
            }
            call(&mut self.prototypes);
            call(&mut self.projector.w1);
            call(&mut self.projector.b1);
            call(&mut self.projector.w2);
            call(&mut self.projector.b2);
        }
    }

    pub fn tensor_count(&self) -> usize {
        4 + self.blocks.len() * 16 + 5
    }

    /// Total scalar parameter count.
    pub fn param_len(&self) -> usize {
        let mut n = 0;
        self.visit_tensors(|_, t| n += t.len());
        n
    }

    /// Tensors shaped like this model, filled with zeros (momentum
    /// buffers, gradient accumulators).
    pub fn zeros_like(&self) -> Vec<Array2<S>> {
        let mut out = Vec::with_capacity(self.tensor_count());
        self.visit_tensors(|_, t| out.push(Array2::zeros(t.dim())));
        out
    }

    /// Check that two models are aggregation-compatible.
    pub fn shape_matches(&self, other: &Self) -> bool {
        if self.arch != other.arch {
            return false;
        }
        let mut shapes = Vec::new();
        self.visit_tensors(|_, t| shapes.push(t.dim()));
        let mut ok = true;
        let mut i = 0;
        other.visit_tensors(|_, t| {
            if i >= shapes.len() || shapes[i] != t.dim() {
                ok = false;
            }
            i += 1;
        });
        ok && i == shapes.len()
    }
}

/// Fresh model with N(0, 0.02) weights, zero biases, identity layer norms.
pub fn init_model<S: Scalar>(arch: &ArchConfig, seed: u64) -> Result<ModelParams<S>> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f64, 0.02).expect("valid normal");
    let mut randn = |r: usize, c: usize| -> Array2<S> {
        Array2::from_shape_fn((r, c), |_| S::cast(normal.sample(&mut rng)))
    };
    let d = arch.dim;
    let embed = EmbedParams {
        w: randn(arch.patch_dim(), d),
        b: Array2::zeros((1, d)),
        cls: randn(1, d),
        pos: randn(arch.seq_len(), d),
    };
    let mut blocks = Vec::with_capacity(arch.depth);
    for _ in 0..arch.depth {
        blocks.push(BlockParams {
            norm1: LayerNormParams {
                gamma: Array2::ones((1, d)),
                beta: Array2::zeros((1, d)),
            },
            attn: AttentionParams {
                wq: randn(d, d),
                bq: Array2::zeros((1, d)),
                wk: randn(d, d),
                bk: Array2::zeros((1, d)),
                wv: randn(d, d),
                bv: Array2::zeros((1, d)),
                wo: randn(d, d),
                bo: Array2::zeros((1, d)),
            },
            norm2: LayerNormParams {
                gamma: Array2::ones((1, d)),
                beta: Array2::zeros((1, d)),
            },
            mlp: MlpParams {
                w1: randn(d, arch.mlp_hidden),
                b1: Array2::zeros((1, arch.mlp_hidden)),
                w2: randn(arch.mlp_hidden, d),
                b2: Array2::zeros((1, d)),
            },
        });
    }
    let prototypes = randn(arch.classes, d);
    // The projection head sees unit-norm features, so its weights start
    // an order of magnitude wider to keep the head output away from the
    // degenerate-norm region.
    let head_normal = Normal::new(0.0f64, 0.2).expect("valid normal");
    let mut head_randn = |r: usize, c: usize| -> Array2<S> {
        Array2::from_shape_fn((r, c), |_| S::cast(head_normal.sample(&mut rng)))
    };
    let projector = MlpParams {
        w1: head_randn(d, d),
        b1: Array2::zeros((1, d)),
        w2: head_randn(d, arch.proj_dim),
        b2: Array2::zeros((1, arch.proj_dim)),
    };
    Ok(ModelParams {
        arch: arch.clone(),
        embed,
        blocks,
        prototypes,
        projector,
    })
}

/// A batch of patch-tokenized raw inputs: `(samples * T) x patch_dim`.
#[derive(Clone, Debug)]
pub struct PatchBatch<S: Scalar> {
    pub data: Array2<S>,
    pub samples: usize,
    pub tokens: usize,
}

/// A batch of embedded token sequences B^0 (positional embeddings added):
/// `(samples * (T+1)) x dim`.
#[derive(Clone, Debug)]
pub struct PatchSequence<S: Scalar> {
    pub tokens: Array2<S>,
    pub samples: usize,
    pub seq: usize,
}

/// Token activations B^l emitted by block `layer_index` for one batch.
#[derive(Clone, Debug)]
pub struct BlockOutput<S: Scalar> {
    /// 1-based block index in [1, L].
    pub layer_index: usize,
    pub tokens: Array2<S>,
    pub samples: usize,
    pub seq: usize,
}

/// Per-source, per-class unit-norm prototype vectors shared with the
/// target client.
#[derive(Clone, Debug)]
pub struct PrototypeSet<S: Scalar> {
    pub source_id: usize,
    /// classes x dim, each row unit l2 norm.
    pub vectors: Array2<S>,
    pub class_labels: Vec<usize>,
}

/// Cut flat images (`samples x (channels * side^2)`, plane-major layout)
/// into per-patch pixel vectors.
pub fn patchify<S: Scalar>(images: &Array2<S>, arch: &ArchConfig) -> Result<PatchBatch<S>> {
    let side = arch.image_side;
    let expected = arch.channels * side * side;
    if images.ncols() != expected {
        return Err(CoreError::Input(format!(
            "image width {} does not match side {} x channels {}",
            images.ncols(),
            side,
            arch.channels
        )));
    }
    let p = arch.patch_side;
    let per_side = side / p;
    let t = per_side * per_side;
    let pd = arch.patch_dim();
    let n = images.nrows();
    let mut data = Array2::zeros((n * t, pd));
    for sample in 0..n {
        let img = images.row(sample);
        for py in 0..per_side {
            for px in 0..per_side {
                let token = py * per_side + px;
                let mut col = 0;
                for c in 0..arch.channels {
                    let plane = c * side * side;
                    for dy in 0..p {
                        for dx in 0..p {
                            let pixel = plane + (py * p + dy) * side + (px * p + dx);
                            data[(sample * t + token, col)] = img[pixel];
                            col += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(PatchBatch {
        data,
        samples: n,
        tokens: t,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_scale_patch_count() {
        let arch = ArchConfig {
            image_side: 224,
            patch_side: 16,
            ..ArchConfig::default()
        };
        assert_eq!(arch.patch_tokens(), 196);
        assert_eq!(arch.seq_len(), 197);
    }

    #[test]
    fn default_profile_is_desk_scale() {
        let arch = ArchConfig::default();
        assert_eq!((arch.depth, arch.dim, arch.heads), (4, 64, 4));
        assert_eq!(arch.patch_tokens(), 16);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let arch = ArchConfig::default();
        let a = init_model::<f64>(&arch, 9).unwrap();
        let b = init_model::<f64>(&arch, 9).unwrap();
        assert_eq!(a, b);
        let c = init_model::<f64>(&arch, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn visit_orders_agree() {
        let arch = ArchConfig {
            depth: 2,
            dim: 8,
            heads: 2,
            mlp_hidden: 16,
            ..ArchConfig::default()
        };
        let mut m = init_model::<f64>(&arch, 1).unwrap();
        let mut names = Vec::new();
        let mut dims = Vec::new();
        m.visit_tensors(|n, t| {
            names.push(n.to_string());
            dims.push(t.dim());
        });
        assert_eq!(names.len(), m.tensor_count());
        let mut mut_dims = Vec::new();
        m.visit_tensors_mut(|_, t| mut_dims.push(t.dim()));
        assert_eq!(dims, mut_dims);
        assert_eq!(names[0], "embed.w");
        assert_eq!(names.last().unwrap(), "proj.b2");
    }

    #[test]
    fn patchify_rejects_bad_width() {
        let arch = ArchConfig::default();
        let images = Array2::<f64>::zeros((2, 100));
        assert!(matches!(
            patchify(&images, &arch),
            Err(CoreError::Input(_))
        ));
    }

    #[test]
    fn patchify_layout_roundtrip() {
        let arch = ArchConfig {
            image_side: 4,
            patch_side: 2,
            ..ArchConfig::default()
        };
        // image 4x4 with pixel value = linear index
        let images = Array2::from_shape_fn((1, 16), |(_, j)| j as f64);
        let pb = patchify(&images, &arch).unwrap();
        assert_eq!(pb.tokens, 4);
        // first patch = rows 0..2, cols 0..2 => pixels 0,1,4,5
        assert_eq!(pb.data.row(0).to_vec(), vec![0.0, 1.0, 4.0, 5.0]);
        // last patch = rows 2..4, cols 2..4 => pixels 10,11,14,15
        assert_eq!(pb.data.row(3).to_vec(), vec![10.0, 11.0, 14.0, 15.0]);
    }
}
