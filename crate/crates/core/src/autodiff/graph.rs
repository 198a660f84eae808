use ndarray::{s, Array2, Axis};

use crate::scalar::Scalar;

/// Handle to a node on the tape.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(pub(crate) usize);

/// What row-normalization emits for rows whose norm falls below the
/// threshold. Either way the row receives zero gradient.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum DegenerateRows {
    /// Emit an all-zero row (downstream logits become uniform).
    Zero,
    /// Emit the first standard basis vector.
    FirstBasis,
}

enum Op<S: Scalar> {
    Leaf,
    Detach(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, S),
    /// a (n x k) * b (k x m)
    MatMul(NodeId, NodeId),
    /// a (n x k) * b^T (m x k)
    MatMulNT(NodeId, NodeId),
    /// x (n x d) + bias row (1 x d) broadcast over rows
    AddRowBias(NodeId, NodeId),
    /// x (n x m) + column (n x 1) broadcast over columns
    AddColVec(NodeId, NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: S,
    },
    Gelu(NodeId),
    /// Multi-head scaled dot-product self-attention over per-sample row
    /// blocks. `q`, `k`, `v` are `(samples * seq) x dim`; heads split the
    /// feature dimension into contiguous column blocks. Softmaxed scores
    /// are cached for the backward pass.
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        samples: usize,
        heads: usize,
        weights: Vec<Array2<S>>,
    },
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    NormalizeRows {
        x: NodeId,
        eps: S,
        degenerate: DegenerateRows,
    },
    /// (n x m) -> (n x 1)
    RowSum(NodeId),
    /// (n x m) -> (1 x 1)
    SumAll(NodeId),
    /// sum(x * mask) -> (1 x 1) with a constant mask
    MaskSum { x: NodeId, mask: Array2<S> },
    Exp(NodeId),
    Ln(NodeId),
    ClampMin(NodeId, S),
    /// out.row(i) = x.row(rows[i])
    GatherRows { x: NodeId, rows: Vec<usize> },
    /// Mean over each sample's patch-token rows (block rows 1..seq),
    /// (samples * seq) x d -> samples x d.
    MeanPatchRows { x: NodeId, samples: usize, seq: usize },
    /// Prepend a shared classification-token row to each sample's patch
    /// rows: (samples * t) x d plus cls (1 x d) -> (samples * (t+1)) x d.
    AssembleTokens {
        patches: NodeId,
        cls: NodeId,
        samples: usize,
    },
    /// Add a (seq x d) positional table to every sample block.
    AddPosPerSample { x: NodeId, pos: NodeId, samples: usize },
}

struct Node<S: Scalar> {
    value: Array2<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Single-use reverse-mode tape.
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Array2<S>>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array2<S> {
        &self.nodes[id.0].value
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, id: NodeId) -> S {
        let v = self.value(id);
        assert_eq!(v.dim(), (1, 1), "node is not scalar");
        v[(0, 0)]
    }

    /// Gradient accumulated by the last `backward` call, if any reached
    /// this node.
    pub fn grad(&self, id: NodeId) -> Option<&Array2<S>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: Array2<S>, op: Op<S>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Leaf whose gradient will be tracked.
    pub fn var(&mut self, value: Array2<S>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Array2<S>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Value passes through; gradient flow stops here.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.clone();
        self.push(v, Op::Detach(x), false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let rq = self.requires(a) || self.requires(b);
        self.push(v, Op::Add(a, b), rq)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let rq = self.requires(a) || self.requires(b);
        self.push(v, Op::Sub(a, b), rq)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let rq = self.requires(a) || self.requires(b);
        self.push(v, Op::Mul(a, b), rq)
    }

    pub fn scale(&mut self, a: NodeId, c: S) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x * c);
        let rq = self.requires(a);
        self.push(v, Op::Scale(a, c), rq)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        let rq = self.requires(a) || self.requires(b);
        self.push(v, Op::MatMul(a, b), rq)
    }

    /// `a . b^T` without materializing the transpose on the tape.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value.t());
        let rq = self.requires(a) || self.requires(b);
        self.push(v, Op::MatMulNT(a, b), rq)
    }

    pub fn add_row_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let b = &self.nodes[bias.0].value;
        assert_eq!(b.nrows(), 1, "row bias must be 1 x d");
        let v = &self.nodes[x.0].value + &b.row(0);
        let rq = self.requires(x) || self.requires(bias);
        self.push(v, Op::AddRowBias(x, bias), rq)
    }

    pub fn add_col_vec(&mut self, x: NodeId, col: NodeId) -> NodeId {
        let c = &self.nodes[col.0].value;
        assert_eq!(c.ncols(), 1, "column vector must be n x 1");
        let v = &self.nodes[x.0].value + &c.column(0).insert_axis(Axis(1));
        let rq = self.requires(x) || self.requires(col);
        self.push(v, Op::AddColVec(x, col), rq)
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: S) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let g = self.nodes[gamma.0].value.row(0).to_owned();
        let b = self.nodes[beta.0].value.row(0).to_owned();
        let mut out = Array2::zeros(xv.dim());
        for (i, row) in xv.rows().into_iter().enumerate() {
            let (mean, inv_std) = row_moments(&row.to_owned(), eps);
            for (j, &v) in row.iter().enumerate() {
                out[(i, j)] = (v - mean) * inv_std * g[j] + b[j];
            }
        }
        let rq = self.requires(x) || self.requires(gamma) || self.requires(beta);
        self.push(out, Op::LayerNorm { x, gamma, beta, eps }, rq)
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.mapv(gelu_tanh);
        let rq = self.requires(x);
        self.push(v, Op::Gelu(x), rq)
    }

    /// Multi-head self-attention. `dim` must divide evenly into `heads`
    /// column blocks; rows are `samples` blocks of `seq` tokens each.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, samples: usize, heads: usize) -> NodeId {
        let (rows, dim) = self.nodes[q.0].value.dim();
        assert_eq!(rows % samples, 0, "rows not divisible into samples");
        assert_eq!(dim % heads, 0, "dim not divisible into heads");
        let seq = rows / samples;
        let hd = dim / heads;
        let scale = S::cast(1.0 / (hd as f64).sqrt());
        let qv = &self.nodes[q.0].value;
        let kv = &self.nodes[k.0].value;
        let vv = &self.nodes[v.0].value;
        let mut out = Array2::zeros((rows, dim));
        let mut weights = Vec::with_capacity(samples * heads);
        for sidx in 0..samples {
            let r0 = sidx * seq;
            for h in 0..heads {
                let c0 = h * hd;
                let qs = qv.slice(s![r0..r0 + seq, c0..c0 + hd]);
                let ks = kv.slice(s![r0..r0 + seq, c0..c0 + hd]);
                let vs = vv.slice(s![r0..r0 + seq, c0..c0 + hd]);
                let mut scores = qs.dot(&ks.t());
                scores.mapv_inplace(|x| x * scale);
                softmax_rows_inplace(&mut scores);
                let o = scores.dot(&vs);
                out.slice_mut(s![r0..r0 + seq, c0..c0 + hd]).assign(&o);
                weights.push(scores);
            }
        }
        let rq = self.requires(q) || self.requires(k) || self.requires(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                samples,
                heads,
                weights,
            },
            rq,
        )
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let mut v = self.nodes[x.0].value.clone();
        softmax_rows_inplace(&mut v);
        let rq = self.requires(x);
        self.push(v, Op::SoftmaxRows(x), rq)
    }

    pub fn log_softmax_rows(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let mut out = xv.clone();
        for mut row in out.rows_mut() {
            let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<S>().ln() + max;
            row.mapv_inplace(|v| v - lse);
        }
        let rq = self.requires(x);
        self.push(out, Op::LogSoftmaxRows(x), rq)
    }

    pub fn normalize_rows(&mut self, x: NodeId, eps: S, degenerate: DegenerateRows) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let mut out = Array2::zeros(xv.dim());
        for (i, row) in xv.rows().into_iter().enumerate() {
            let norm = row.iter().map(|&v| v * v).sum::<S>().sqrt();
            if norm < eps {
                if let DegenerateRows::FirstBasis = degenerate {
                    out[(i, 0)] = S::one();
                }
            } else {
                for (j, &v) in row.iter().enumerate() {
                    out[(i, j)] = v / norm;
                }
            }
        }
        let rq = self.requires(x);
        self.push(out, Op::NormalizeRows { x, eps, degenerate }, rq)
    }

    pub fn row_sum(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0]
            .value
            .sum_axis(Axis(1))
            .insert_axis(Axis(1));
        let rq = self.requires(x);
        self.push(v, Op::RowSum(x), rq)
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let total = self.nodes[x.0].value.sum();
        let rq = self.requires(x);
        self.push(Array2::from_elem((1, 1), total), Op::SumAll(x), rq)
    }

    pub fn mask_sum(&mut self, x: NodeId, mask: Array2<S>) -> NodeId {
        assert_eq!(self.nodes[x.0].value.dim(), mask.dim(), "mask shape mismatch");
        let total = (&self.nodes[x.0].value * &mask).sum();
        let rq = self.requires(x);
        self.push(Array2::from_elem((1, 1), total), Op::MaskSum { x, mask }, rq)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.mapv(S::exp);
        let rq = self.requires(x);
        self.push(v, Op::Exp(x), rq)
    }

    pub fn ln(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.mapv(S::ln);
        let rq = self.requires(x);
        self.push(v, Op::Ln(x), rq)
    }

    pub fn clamp_min(&mut self, x: NodeId, floor: S) -> NodeId {
        let v = self.nodes[x.0].value.mapv(|v| v.max(floor));
        let rq = self.requires(x);
        self.push(v, Op::ClampMin(x, floor), rq)
    }

    pub fn gather_rows(&mut self, x: NodeId, rows: Vec<usize>) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let mut out = Array2::zeros((rows.len(), xv.ncols()));
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).assign(&xv.row(r));
        }
        let rq = self.requires(x);
        self.push(out, Op::GatherRows { x, rows }, rq)
    }

    pub fn mean_patch_rows(&mut self, x: NodeId, samples: usize, seq: usize) -> NodeId {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.nrows(), samples * seq);
        assert!(seq >= 2, "need at least one patch token");
        let t = seq - 1;
        let inv = S::cast(1.0 / t as f64);
        let mut out = Array2::zeros((samples, xv.ncols()));
        for sidx in 0..samples {
            for r in 1..seq {
                let row = xv.row(sidx * seq + r);
                for (j, &v) in row.iter().enumerate() {
                    out[(sidx, j)] += v * inv;
                }
            }
        }
        let rq = self.requires(x);
        self.push(out, Op::MeanPatchRows { x, samples, seq }, rq)
    }

    pub fn assemble_tokens(&mut self, patches: NodeId, cls: NodeId, samples: usize) -> NodeId {
        let pv = &self.nodes[patches.0].value;
        let cv = &self.nodes[cls.0].value;
        assert_eq!(cv.nrows(), 1, "cls token must be 1 x d");
        assert_eq!(pv.nrows() % samples, 0);
        let t = pv.nrows() / samples;
        let seq = t + 1;
        let mut out = Array2::zeros((samples * seq, pv.ncols()));
        for sidx in 0..samples {
            out.row_mut(sidx * seq).assign(&cv.row(0));
            for r in 0..t {
                out.row_mut(sidx * seq + 1 + r).assign(&pv.row(sidx * t + r));
            }
        }
        let rq = self.requires(patches) || self.requires(cls);
        self.push(out, Op::AssembleTokens { patches, cls, samples }, rq)
    }

    pub fn add_pos_per_sample(&mut self, x: NodeId, pos: NodeId, samples: usize) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let pv = &self.nodes[pos.0].value;
        assert_eq!(xv.nrows(), samples * pv.nrows());
        let seq = pv.nrows();
        let mut out = xv.clone();
        for sidx in 0..samples {
            let mut block = out.slice_mut(s![sidx * seq..(sidx + 1) * seq, ..]);
            block += pv;
        }
        let rq = self.requires(x) || self.requires(pos);
        self.push(out, Op::AddPosPerSample { x, pos, samples }, rq)
    }

    /// Run reverse accumulation from a scalar (1x1) node.
    pub fn backward(&mut self, loss: NodeId) {
        assert_eq!(
            self.nodes[loss.0].value.dim(),
            (1, 1),
            "backward expects a scalar loss node"
        );
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Array2::from_elem((1, 1), S::one()));

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let g = match self.grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate_parents(i, &g);
            self.grads[i] = Some(g);
        }
    }

    fn add_grad(&mut self, id: NodeId, delta: Array2<S>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut self.grads[id.0] {
            Some(g) => *g += &delta,
            slot => *slot = Some(delta),
        }
    }

    fn accumulate_parents(&mut self, i: usize, g: &Array2<S>) {
        // Values are read before any grad write; ops reference only
        // earlier nodes, so reverse index order is a valid topological
        // order.
        match &self.nodes[i].op {
            Op::Leaf | Op::Detach(_) => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.add_grad(a, g.clone());
                self.add_grad(b, g.clone());
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.add_grad(a, g.clone());
                self.add_grad(b, g.mapv(|v| -v));
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let da = g * &self.nodes[b.0].value;
                let db = g * &self.nodes[a.0].value;
                self.add_grad(a, da);
                self.add_grad(b, db);
            }
            Op::Scale(a, c) => {
                let (a, c) = (*a, *c);
                self.add_grad(a, g.mapv(|v| v * c));
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let da = g.dot(&self.nodes[b.0].value.t());
                let db = self.nodes[a.0].value.t().dot(g);
                self.add_grad(a, da);
                self.add_grad(b, db);
            }
            Op::MatMulNT(a, b) => {
                let (a, b) = (*a, *b);
                let da = g.dot(&self.nodes[b.0].value);
                let db = g.t().dot(&self.nodes[a.0].value);
                self.add_grad(a, da);
                self.add_grad(b, db);
            }
            Op::AddRowBias(x, bias) => {
                let (x, bias) = (*x, *bias);
                let db = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                self.add_grad(x, g.clone());
                self.add_grad(bias, db);
            }
            Op::AddColVec(x, col) => {
                let (x, col) = (*x, *col);
                let dc = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                self.add_grad(x, g.clone());
                self.add_grad(col, dc);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (x, gamma, beta, eps) = (*x, *gamma, *beta, *eps);
                let xv = &self.nodes[x.0].value;
                let gv = self.nodes[gamma.0].value.row(0).to_owned();
                let d = xv.ncols();
                let inv_d = S::cast(1.0 / d as f64);
                let mut dx = Array2::zeros(xv.dim());
                let mut dgamma = Array2::zeros((1, d));
                let mut dbeta = Array2::zeros((1, d));
                for (r, row) in xv.rows().into_iter().enumerate() {
                    let row = row.to_owned();
                    let (mean, inv_std) = row_moments(&row, eps);
                    let xhat: Vec<S> = row.iter().map(|&v| (v - mean) * inv_std).collect();
                    let grow = g.row(r);
                    let gy: Vec<S> = grow.iter().zip(gv.iter()).map(|(&g, &w)| g * w).collect();
                    let mean_gy = gy.iter().cloned().sum::<S>() * inv_d;
                    let mean_gy_xhat = gy
                        .iter()
                        .zip(xhat.iter())
                        .map(|(&a, &b)| a * b)
                        .sum::<S>()
                        * inv_d;
                    for j in 0..d {
                        dx[(r, j)] = (gy[j] - mean_gy - xhat[j] * mean_gy_xhat) * inv_std;
                        dgamma[(0, j)] += grow[j] * xhat[j];
                        dbeta[(0, j)] += grow[j];
                    }
                }
                self.add_grad(x, dx);
                self.add_grad(gamma, dgamma);
                self.add_grad(beta, dbeta);
            }
            Op::Gelu(x) => {
                let x = *x;
                let dx = self.nodes[x.0].value.mapv(gelu_tanh_deriv) * g;
                self.add_grad(x, dx);
            }
            Op::Attention {
                q,
                k,
                v,
                samples,
                heads,
                weights,
            } => {
                let (q, k, v, samples, heads) = (*q, *k, *v, *samples, *heads);
                let qv = &self.nodes[q.0].value;
                let kv = &self.nodes[k.0].value;
                let vv = &self.nodes[v.0].value;
                let (rows, dim) = qv.dim();
                let seq = rows / samples;
                let hd = dim / heads;
                let scale = S::cast(1.0 / (hd as f64).sqrt());
                let mut dq = Array2::zeros((rows, dim));
                let mut dk = Array2::zeros((rows, dim));
                let mut dv = Array2::zeros((rows, dim));
                for sidx in 0..samples {
                    let r0 = sidx * seq;
                    for h in 0..heads {
                        let c0 = h * hd;
                        let attn = &weights[sidx * heads + h];
                        let qs = qv.slice(s![r0..r0 + seq, c0..c0 + hd]);
                        let ks = kv.slice(s![r0..r0 + seq, c0..c0 + hd]);
                        let vs = vv.slice(s![r0..r0 + seq, c0..c0 + hd]);
                        let go = g.slice(s![r0..r0 + seq, c0..c0 + hd]);
                        let dvs = attn.t().dot(&go);
                        let dattn = go.dot(&vs.t());
                        // softmax backward per row
                        let mut dscores = Array2::zeros((seq, seq));
                        for r in 0..seq {
                            let arow = attn.row(r);
                            let drow = dattn.row(r);
                            let dot = arow
                                .iter()
                                .zip(drow.iter())
                                .map(|(&a, &d)| a * d)
                                .sum::<S>();
                            for c in 0..seq {
                                dscores[(r, c)] = arow[c] * (drow[c] - dot) * scale;
                            }
                        }
                        let dqs = dscores.dot(&ks);
                        let dks = dscores.t().dot(&qs);
                        dq.slice_mut(s![r0..r0 + seq, c0..c0 + hd]).assign(&dqs);
                        dk.slice_mut(s![r0..r0 + seq, c0..c0 + hd]).assign(&dks);
                        dv.slice_mut(s![r0..r0 + seq, c0..c0 + hd]).assign(&dvs);
                    }
                }
                self.add_grad(q, dq);
                self.add_grad(k, dk);
                self.add_grad(v, dv);
            }
            Op::SoftmaxRows(x) => {
                let x = *x;
                let y = &self.nodes[i].value;
                let mut dx = Array2::zeros(y.dim());
                for (r, yrow) in y.rows().into_iter().enumerate() {
                    let grow = g.row(r);
                    let dot = yrow
                        .iter()
                        .zip(grow.iter())
                        .map(|(&a, &b)| a * b)
                        .sum::<S>();
                    for (c, &yv) in yrow.iter().enumerate() {
                        dx[(r, c)] = yv * (grow[c] - dot);
                    }
                }
                self.add_grad(x, dx);
            }
            Op::LogSoftmaxRows(x) => {
                let x = *x;
                let y = &self.nodes[i].value;
                let mut dx = Array2::zeros(y.dim());
                for (r, yrow) in y.rows().into_iter().enumerate() {
                    let grow = g.row(r);
                    let gsum = grow.iter().cloned().sum::<S>();
                    for (c, &yv) in yrow.iter().enumerate() {
                        dx[(r, c)] = grow[c] - yv.exp() * gsum;
                    }
                }
                self.add_grad(x, dx);
            }
            Op::NormalizeRows { x, eps, .. } => {
                let (x, eps) = (*x, *eps);
                let xv = &self.nodes[x.0].value;
                let mut dx = Array2::zeros(xv.dim());
                for (r, row) in xv.rows().into_iter().enumerate() {
                    let norm = row.iter().map(|&v| v * v).sum::<S>().sqrt();
                    if norm < eps {
                        continue; // degenerate rows get zero gradient
                    }
                    let grow = g.row(r);
                    let y: Vec<S> = row.iter().map(|&v| v / norm).collect();
                    let dot = y
                        .iter()
                        .zip(grow.iter())
                        .map(|(&a, &b)| a * b)
                        .sum::<S>();
                    for c in 0..xv.ncols() {
                        dx[(r, c)] = (grow[c] - y[c] * dot) / norm;
                    }
                }
                self.add_grad(x, dx);
            }
            Op::RowSum(x) => {
                let x = *x;
                let xv = &self.nodes[x.0].value;
                let mut dx = Array2::zeros(xv.dim());
                for r in 0..xv.nrows() {
                    let gv = g[(r, 0)];
                    dx.row_mut(r).fill(gv);
                }
                self.add_grad(x, dx);
            }
            Op::SumAll(x) => {
                let x = *x;
                let gv = g[(0, 0)];
                let dx = Array2::from_elem(self.nodes[x.0].value.dim(), gv);
                self.add_grad(x, dx);
            }
            Op::MaskSum { x, mask } => {
                let x = *x;
                let gv = g[(0, 0)];
                let dx = mask.mapv(|m| m * gv);
                self.add_grad(x, dx);
            }
            Op::Exp(x) => {
                let x = *x;
                let dx = &self.nodes[i].value * g;
                self.add_grad(x, dx);
            }
            Op::Ln(x) => {
                let x = *x;
                let dx = g / &self.nodes[x.0].value;
                self.add_grad(x, dx);
            }
            Op::ClampMin(x, floor) => {
                let (x, floor) = (*x, *floor);
                let xv = &self.nodes[x.0].value;
                let mut dx = g.clone();
                dx.zip_mut_with(xv, |d, &v| {
                    if v < floor {
                        *d = S::zero();
                    }
                });
                self.add_grad(x, dx);
            }
            Op::GatherRows { x, rows } => {
                let x = *x;
                let rows = rows.clone();
                let xv_dim = self.nodes[x.0].value.dim();
                let mut dx = Array2::zeros(xv_dim);
                for (i, &r) in rows.iter().enumerate() {
                    let mut drow = dx.row_mut(r);
                    drow += &g.row(i);
                }
                self.add_grad(x, dx);
            }
            Op::MeanPatchRows { x, samples, seq } => {
                let (x, samples, seq) = (*x, *samples, *seq);
                let t = seq - 1;
                let inv = S::cast(1.0 / t as f64);
                let mut dx = Array2::zeros(self.nodes[x.0].value.dim());
                for sidx in 0..samples {
                    for r in 1..seq {
                        let mut drow = dx.row_mut(sidx * seq + r);
                        drow.zip_mut_with(&g.row(sidx), |d, &gv| *d += gv * inv);
                    }
                }
                self.add_grad(x, dx);
            }
            Op::AssembleTokens {
                patches,
                cls,
                samples,
            } => {
                let (patches, cls, samples) = (*patches, *cls, *samples);
                let pdim = self.nodes[patches.0].value.dim();
                let t = pdim.0 / samples;
                let seq = t + 1;
                let mut dp = Array2::zeros(pdim);
                let mut dc = Array2::zeros((1, pdim.1));
                for sidx in 0..samples {
                    let mut crow = dc.row_mut(0);
                    crow += &g.row(sidx * seq);
                    for r in 0..t {
                        dp.row_mut(sidx * t + r).assign(&g.row(sidx * seq + 1 + r));
                    }
                }
                self.add_grad(patches, dp);
                self.add_grad(cls, dc);
            }
            Op::AddPosPerSample { x, pos, samples } => {
                let (x, pos, samples) = (*x, *pos, *samples);
                let seq = self.nodes[pos.0].value.nrows();
                let cols = self.nodes[pos.0].value.ncols();
                let mut dpos = Array2::zeros((seq, cols));
                for sidx in 0..samples {
                    dpos += &g.slice(s![sidx * seq..(sidx + 1) * seq, ..]);
                }
                self.add_grad(x, g.clone());
                self.add_grad(pos, dpos);
            }
        }
    }
}

fn row_moments<S: Scalar>(row: &ndarray::Array1<S>, eps: S) -> (S, S) {
    let d = S::cast(row.len() as f64);
    let mean = row.iter().cloned().sum::<S>() / d;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / d;
    (mean, S::one() / (var + eps).sqrt())
}

fn softmax_rows_inplace<S: Scalar>(m: &mut Array2<S>) {
    for mut row in m.rows_mut() {
        let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.iter().cloned().sum::<S>();
        row.mapv_inplace(|v| v / total);
    }
}

/// Tanh approximation of the Gaussian error linear unit. Smooth
/// everywhere, which keeps finite-difference checks clean.
fn gelu_tanh<S: Scalar>(x: S) -> S {
    let c = S::cast(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a = S::cast(0.044_715);
    let u = c * (x + a * x * x * x);
    S::cast(0.5) * x * (S::one() + u.tanh())
}

fn gelu_tanh_deriv<S: Scalar>(x: S) -> S {
    let c = S::cast(0.797_884_560_802_865_4);
    let a = S::cast(0.044_715);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = S::one() - t * t;
    let du = c * (S::one() + S::cast(3.0) * a * x * x);
    S::cast(0.5) * (S::one() + t) + S::cast(0.5) * x * sech2 * du
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn scalar_chain_value_and_grad() {
        let mut g = Graph::<f64>::new();
        let x = g.var(array![[2.0, 3.0]]);
        let sq = g.mul(x, x);
        let loss = g.sum_all(sq);
        assert_eq!(g.scalar(loss), 13.0);
        g.backward(loss);
        let gx = g.grad(x).unwrap();
        assert_eq!(gx, &array![[4.0, 6.0]]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.var(array![[1.5]]);
        let d = g.detach(x);
        let y = g.mul(x, d); // y = x * stopgrad(x)
        let loss = g.sum_all(y);
        g.backward(loss);
        // d/dx of x * const(1.5) = 1.5, not 2x = 3.0
        assert_eq!(g.grad(x).unwrap()[(0, 0)], 1.5);
    }

    #[test]
    fn matmul_grads_match_manual() {
        let mut g = Graph::<f64>::new();
        let a = g.var(array![[1.0, 2.0], [3.0, 4.0]]);
        let b = g.var(array![[0.5, -1.0], [2.0, 0.0]]);
        let y = g.matmul(a, b);
        let loss = g.sum_all(y);
        g.backward(loss);
        // dA = 1 . B^T, dB = A^T . 1
        assert_eq!(g.grad(a).unwrap(), &array![[-0.5, 2.0], [-0.5, 2.0]]);
        assert_eq!(g.grad(b).unwrap(), &array![[4.0, 4.0], [6.0, 6.0]]);
    }

    #[test]
    fn normalize_rows_degenerate_modes() {
        let mut g = Graph::<f64>::new();
        let x = g.var(array![[3.0, 4.0], [0.0, 0.0]]);
        let zero = g.normalize_rows(x, 1e-12, DegenerateRows::Zero);
        assert_eq!(g.value(zero).row(0).to_vec(), vec![0.6, 0.8]);
        assert_eq!(g.value(zero).row(1).to_vec(), vec![0.0, 0.0]);
        let basis = g.normalize_rows(x, 1e-12, DegenerateRows::FirstBasis);
        assert_eq!(g.value(basis).row(1).to_vec(), vec![1.0, 0.0]);
    }

    #[test]
    fn log_softmax_rows_is_stable_shift() {
        let mut g = Graph::<f64>::new();
        let x = g.var(array![[1000.0, 1000.0, 1000.0]]);
        let y = g.log_softmax_rows(x);
        let expect = -(3.0f64).ln();
        for &v in g.value(y).iter() {
            assert!((v - expect).abs() < 1e-12);
        }
    }
}
