//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! A [`Graph`] is a per-step tape: leaves are copied in (parameters flagged as
//! differentiable, data as constants), operators execute eagerly and append a node,
//! and a single [`Graph::backward`] pass walks the tape in reverse, accumulating
//! vector-Jacobian products. Gradients are then read back per leaf and folded into
//! the caller's [`Tensor`] accumulators.
//!
//! Policy: one backward pass per graph (enforced); gradients flow only to nodes
//! reachable from differentiable leaves; `row_max_detach` is explicitly a
//! stop-gradient (used for numerically stable softmax shifts, where the max term's
//! derivative cancels exactly, so detaching is mathematically lossless).

use crate::gemm::{gemm_nn, gemm_nt, gemm_tn};
use crate::scalar::{cast, Scalar};
use crate::tensor::{broadcast_shapes, for_each_broadcast, numel, Tensor};
use rand::Rng;

/// Handle to a node on the tape (index; cheap to copy).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op<F: Scalar> {
    Leaf,
    Bin(BinKind),
    Scale(F),
    Matmul,
    /// `A[m×k] · B[n×k]ᵀ` without materializing the transpose.
    MatmulNT,
    Relu,
    Exp,
    Ln,
    RowSum,
    /// Per-row max, treated as a constant in the backward pass.
    RowMaxDetach,
    Transpose,
    ConcatCols,
    Sum,
    LayerNorm {
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    /// Inverted dropout; `factors` holds 0 or 1/keep per element.
    Dropout {
        factors: Vec<F>,
    },
}

#[derive(Debug)]
struct Node<F: Scalar> {
    op: Op<F>,
    inputs: Vec<NodeId>,
    shape: Vec<usize>,
    value: Vec<F>,
    needs_grad: bool,
}

/// Per-step reverse-mode tape.
#[derive(Debug, Default)]
pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
    backward_done: bool,
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::with_capacity(64),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    // ── Leaves ───────────────────────────────────────────────────────────────

    /// Copy raw data onto the tape.
    pub fn leaf(&mut self, data: &[F], shape: &[usize], needs_grad: bool) -> NodeId {
        assert_eq!(data.len(), numel(shape), "leaf data/shape mismatch");
        self.push(Op::Leaf, vec![], shape.to_vec(), data.to_vec(), needs_grad)
    }

    /// Non-differentiable leaf from a tensor.
    pub fn constant(&mut self, t: &Tensor<F>) -> NodeId {
        self.leaf(&t.data, &t.shape, false)
    }

    /// Leaf whose differentiability follows the tensor's `requires_grad` flag.
    pub fn param(&mut self, t: &Tensor<F>) -> NodeId {
        self.leaf(&t.data, &t.shape, t.requires_grad)
    }

    // ── Accessors ────────────────────────────────────────────────────────────

    pub fn value(&self, id: NodeId) -> &[F] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Gradient of the loss w.r.t. this node (after `backward`); `None` if the
    /// node is not on a differentiable path.
    pub fn grad(&self, id: NodeId) -> Option<&[F]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    fn push(
        &mut self,
        op: Op<F>,
        inputs: Vec<NodeId>,
        shape: Vec<usize>,
        value: Vec<F>,
        needs_grad: bool,
    ) -> NodeId {
        assert!(
            !self.backward_done,
            "graph already ran backward; build a fresh graph per step"
        );
        self.nodes.push(Node {
            op,
            inputs,
            shape,
            value,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn any_needs_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    // ── Elementwise (broadcasting) ───────────────────────────────────────────

    fn binary(&mut self, kind: BinKind, a: NodeId, b: NodeId) -> NodeId {
        let (asn, bsn) = (&self.nodes[a.0], &self.nodes[b.0]);
        let out_shape = broadcast_shapes(&asn.shape, &bsn.shape).unwrap_or_else(|| {
            panic!(
                "shapes {:?} and {:?} do not broadcast",
                asn.shape, bsn.shape
            )
        });
        let mut out = vec![F::zero(); numel(&out_shape)];
        {
            let (av, bv) = (&asn.value, &bsn.value);
            for_each_broadcast(&asn.shape, &bsn.shape, &out_shape, |o, ia, ib| {
                let (x, y) = (av[ia], bv[ib]);
                out[o] = match kind {
                    BinKind::Add => x + y,
                    BinKind::Sub => x - y,
                    BinKind::Mul => x * y,
                    BinKind::Div => x / y,
                };
            });
        }
        let ng = self.any_needs_grad(&[a, b]);
        self.push(Op::Bin(kind), vec![a, b], out_shape, out, ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(BinKind::Div, a, b)
    }

    /// Multiply by a compile-time-known scalar constant.
    pub fn scale(&mut self, a: NodeId, c: F) -> NodeId {
        let an = &self.nodes[a.0];
        let value: Vec<F> = an.value.iter().map(|&x| x * c).collect();
        let (shape, ng) = (an.shape.clone(), an.needs_grad);
        self.push(Op::Scale(c), vec![a], shape, value, ng)
    }

    // ── Unary maps ───────────────────────────────────────────────────────────

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let an = &self.nodes[a.0];
        let value: Vec<F> = an
            .value
            .iter()
            .map(|&x| if x > F::zero() { x } else { F::zero() })
            .collect();
        let (shape, ng) = (an.shape.clone(), an.needs_grad);
        self.push(Op::Relu, vec![a], shape, value, ng)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let an = &self.nodes[a.0];
        let value: Vec<F> = an.value.iter().map(|&x| x.exp()).collect();
        let (shape, ng) = (an.shape.clone(), an.needs_grad);
        self.push(Op::Exp, vec![a], shape, value, ng)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let an = &self.nodes[a.0];
        let value: Vec<F> = an.value.iter().map(|&x| x.ln()).collect();
        let (shape, ng) = (an.shape.clone(), an.needs_grad);
        self.push(Op::Ln, vec![a], shape, value, ng)
    }

    // ── Matrix products ──────────────────────────────────────────────────────

    /// `A[m×k] · B[k×n] → [m×n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (asn, bsn) = (&self.nodes[a.0], &self.nodes[b.0]);
        assert_eq!(asn.shape.len(), 2, "matmul lhs must be rank 2");
        assert_eq!(bsn.shape.len(), 2, "matmul rhs must be rank 2");
        let (m, k) = (asn.shape[0], asn.shape[1]);
        let (k2, n) = (bsn.shape[0], bsn.shape[1]);
        assert_eq!(
            k, k2,
            "matmul inner dims: {:?} vs {:?}",
            asn.shape, bsn.shape
        );
        let mut out = vec![F::zero(); m * n];
        gemm_nn(m, k, n, &asn.value, &bsn.value, &mut out);
        let ng = self.any_needs_grad(&[a, b]);
        self.push(Op::Matmul, vec![a, b], vec![m, n], out, ng)
    }

    /// `A[m×k] · B[n×k]ᵀ → [m×n]` (row-by-row dot products).
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (asn, bsn) = (&self.nodes[a.0], &self.nodes[b.0]);
        assert_eq!(asn.shape.len(), 2, "matmul_nt lhs must be rank 2");
        assert_eq!(bsn.shape.len(), 2, "matmul_nt rhs must be rank 2");
        let (m, k) = (asn.shape[0], asn.shape[1]);
        let (n, k2) = (bsn.shape[0], bsn.shape[1]);
        assert_eq!(
            k, k2,
            "matmul_nt inner dims: {:?} vs {:?}",
            asn.shape, bsn.shape
        );
        let mut out = vec![F::zero(); m * n];
        gemm_nt(m, k, n, &asn.value, &bsn.value, &mut out);
        let ng = self.any_needs_grad(&[a, b]);
        self.push(Op::MatmulNT, vec![a, b], vec![m, n], out, ng)
    }

    // ── Structure ops ────────────────────────────────────────────────────────

    /// Row sums of a rank-2 tensor: `[r×c] → [r×1]`.
    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        let an = &self.nodes[a.0];
        assert_eq!(an.shape.len(), 2, "row_sum needs rank 2");
        let (r, c) = (an.shape[0], an.shape[1]);
        let mut out = vec![F::zero(); r];
        for i in 0..r {
            let mut s = F::zero();
            for j in 0..c {
                s += an.value[i * c + j];
            }
            out[i] = s;
        }
        let ng = an.needs_grad;
        self.push(Op::RowSum, vec![a], vec![r, 1], out, ng)
    }

    /// Per-row max with gradient flow *stopped*: `[r×c] → [r×1]`.
    pub fn row_max_detach(&mut self, a: NodeId) -> NodeId {
        let an = &self.nodes[a.0];
        assert_eq!(an.shape.len(), 2, "row_max_detach needs rank 2");
        let (r, c) = (an.shape[0], an.shape[1]);
        assert!(c > 0);
        let mut out = vec![F::zero(); r];
        for i in 0..r {
            let mut m = an.value[i * c];
            for j in 1..c {
                m = m.max(an.value[i * c + j]);
            }
            out[i] = m;
        }
        // needs_grad = false: this node is a gradient barrier by construction
        self.push(Op::RowMaxDetach, vec![a], vec![r, 1], out, false)
    }

    /// `[r×c] → [c×r]`.
    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let an = &self.nodes[a.0];
        assert_eq!(an.shape.len(), 2, "transpose needs rank 2");
        let (r, c) = (an.shape[0], an.shape[1]);
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = an.value[i * c + j];
            }
        }
        let ng = an.needs_grad;
        self.push(Op::Transpose, vec![a], vec![c, r], out, ng)
    }

    /// Column-wise concatenation: `[r×c1], [r×c2] → [r×(c1+c2)]`.
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (asn, bsn) = (&self.nodes[a.0], &self.nodes[b.0]);
        assert_eq!(asn.shape.len(), 2);
        assert_eq!(bsn.shape.len(), 2);
        assert_eq!(asn.shape[0], bsn.shape[0], "concat_cols row mismatch");
        let (r, c1, c2) = (asn.shape[0], asn.shape[1], bsn.shape[1]);
        let mut out = vec![F::zero(); r * (c1 + c2)];
        for i in 0..r {
            out[i * (c1 + c2)..i * (c1 + c2) + c1]
                .copy_from_slice(&asn.value[i * c1..(i + 1) * c1]);
            out[i * (c1 + c2) + c1..(i + 1) * (c1 + c2)]
                .copy_from_slice(&bsn.value[i * c2..(i + 1) * c2]);
        }
        let ng = self.any_needs_grad(&[a, b]);
        self.push(Op::ConcatCols, vec![a, b], vec![r, c1 + c2], out, ng)
    }

    /// Full reduction to a single element `[1]`.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let an = &self.nodes[a.0];
        let total: F = an.value.iter().copied().sum();
        let ng = an.needs_grad;
        self.push(Op::Sum, vec![a], vec![1], vec![total], ng)
    }

    // ── Layer normalization ──────────────────────────────────────────────────

    /// Per-row layer normalization with learned scale and shift:
    /// `y = gamma ⊙ (x − μ)/√(σ² + eps) + beta`, statistics over the feature axis.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: F) -> NodeId {
        let xn = &self.nodes[x.0];
        assert_eq!(xn.shape.len(), 2, "layer_norm needs rank 2");
        let (r, c) = (xn.shape[0], xn.shape[1]);
        assert_eq!(self.nodes[gamma.0].value.len(), c, "gamma length");
        assert_eq!(self.nodes[beta.0].value.len(), c, "beta length");
        let mut xhat = vec![F::zero(); r * c];
        let mut inv_std = vec![F::zero(); r];
        let cf = cast::<F>(c as f64);
        for i in 0..r {
            let row = &xn.value[i * c..(i + 1) * c];
            let mut mu = F::zero();
            for &v in row {
                mu += v;
            }
            mu = mu / cf;
            let mut var = F::zero();
            for &v in row {
                var += (v - mu) * (v - mu);
            }
            var = var / cf;
            let is = (var + eps).sqrt().recip();
            inv_std[i] = is;
            for j in 0..c {
                xhat[i * c + j] = (row[j] - mu) * is;
            }
        }
        let gv = &self.nodes[gamma.0].value;
        let bv = &self.nodes[beta.0].value;
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = gv[j] * xhat[i * c + j] + bv[j];
            }
        }
        let ng = self.any_needs_grad(&[x, gamma, beta]);
        self.push(
            Op::LayerNorm { xhat, inv_std },
            vec![x, gamma, beta],
            vec![r, c],
            out,
            ng,
        )
    }

    // ── Dropout ──────────────────────────────────────────────────────────────

    /// Inverted dropout: each element is zeroed with probability `p`, survivors are
    /// scaled by 1/(1−p) so the expectation is unchanged. Evaluation-time code
    /// simply omits this op (identity).
    pub fn dropout<R: Rng>(&mut self, a: NodeId, p: f64, rng: &mut R) -> NodeId {
        assert!((0.0..1.0).contains(&p), "dropout rate must be in [0,1)");
        let an = &self.nodes[a.0];
        let keep_inv = cast::<F>(1.0 / (1.0 - p));
        let factors: Vec<F> = (0..an.value.len())
            .map(|_| {
                if rng.gen::<f64>() < p {
                    F::zero()
                } else {
                    keep_inv
                }
            })
            .collect();
        let value: Vec<F> = an
            .value
            .iter()
            .zip(&factors)
            .map(|(&x, &f)| x * f)
            .collect();
        let (shape, ng) = (an.shape.clone(), an.needs_grad);
        self.push(Op::Dropout { factors }, vec![a], shape, value, ng)
    }

    // ── Backward ─────────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss node. May be called once per graph.
    pub fn backward(&mut self, loss: NodeId) {
        assert!(!self.backward_done, "backward already ran on this graph");
        assert_eq!(
            self.nodes[loss.0].value.len(),
            1,
            "backward seed must be a scalar node"
        );
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].needs_grad {
            return; // nothing differentiable upstream
        }
        self.grads[loss.0] = Some(vec![F::one()]);

        for id in (0..=loss.0).rev() {
            if self.grads[id].is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let g = self.grads[id].take().expect("checked above");
            self.propagate(id, &g);
            self.grads[id] = Some(g);
        }
    }

    /// Ensure a gradient buffer exists for `id` and return it mutably.
    fn grad_buf<'a>(
        grads: &'a mut [Option<Vec<F>>],
        nodes: &[Node<F>],
        id: usize,
    ) -> &'a mut Vec<F> {
        grads[id].get_or_insert_with(|| vec![F::zero(); nodes[id].value.len()])
    }

    fn propagate(&mut self, id: usize, g: &[F]) {
        let inputs: Vec<usize> = self.nodes[id].inputs.iter().map(|n| n.0).collect();
        let wants: Vec<bool> = inputs.iter().map(|&i| self.nodes[i].needs_grad).collect();
        match &self.nodes[id].op {
            Op::Leaf | Op::RowMaxDetach => {}
            Op::Bin(kind) => {
                let kind = *kind;
                let (ai, bi) = (inputs[0], inputs[1]);
                let out_shape = self.nodes[id].shape.clone();
                let a_shape = self.nodes[ai].shape.clone();
                let b_shape = self.nodes[bi].shape.clone();
                // accumulate into fresh local buffers, then fold in (avoids
                // aliasing when both inputs are the same node)
                let mut da = vec![F::zero(); self.nodes[ai].value.len()];
                let mut db = vec![F::zero(); self.nodes[bi].value.len()];
                {
                    let av = &self.nodes[ai].value;
                    let bv = &self.nodes[bi].value;
                    for_each_broadcast(&a_shape, &b_shape, &out_shape, |o, ia, ib| {
                        let go = g[o];
                        match kind {
                            BinKind::Add => {
                                da[ia] += go;
                                db[ib] += go;
                            }
                            BinKind::Sub => {
                                da[ia] += go;
                                db[ib] -= go;
                            }
                            BinKind::Mul => {
                                da[ia] += go * bv[ib];
                                db[ib] += go * av[ia];
                            }
                            BinKind::Div => {
                                let inv = bv[ib].recip();
                                da[ia] += go * inv;
                                db[ib] -= go * av[ia] * inv * inv;
                            }
                        }
                    });
                }
                if wants[0] {
                    Self::add_into(Self::grad_buf(&mut self.grads, &self.nodes, ai), &da);
                }
                if wants[1] {
                    Self::add_into(Self::grad_buf(&mut self.grads, &self.nodes, bi), &db);
                }
            }
            Op::Scale(c) => {
                let c = *c;
                if wants[0] {
                    let buf = Self::grad_buf(&mut self.grads, &self.nodes, inputs[0]);
                    for (d, &s) in buf.iter_mut().zip(g) {
                        *d += c * s;
                    }
                }
            }
            Op::Matmul => {
                let (ai, bi) = (inputs[0], inputs[1]);
                let (m, k) = (self.nodes[ai].shape[0], self.nodes[ai].shape[1]);
                let n = self.nodes[bi].shape[1];
                if wants[0] {
                    // dA += g · Bᵀ
                    let bv = self.nodes[bi].value.clone();
                    let buf = Self::grad_buf(&mut self.grads, &self.nodes, ai);
                    gemm_nt(m, n, k, g, &bv, buf);
                }
                if wants[1] {
                    // dB += Aᵀ · g
                    let av = self.nodes[ai].value.clone();
                    let buf = Self::grad_buf(&mut self.grads, &self.nodes, bi);
                    gemm_tn(k, m, n, &av, g, buf);
                }
            }
            Op::MatmulNT => {
                let (ai, bi) = (inputs[0], inputs[1]);
                let (m, k) = (self.nodes[ai].shape[0], self.nodes[ai].shape[1]);
                let n = self.nodes[bi].shape[0];
                if wants[0] {
                    // dA += g · B
                    let bv = self.nodes[bi].value.clone();
                    let buf = Self::grad_buf(&mut self.grads, &self.nodes, ai);
                    gemm_nn(m, n, k, g, &bv, buf);
                }
                if wants[1] {
                    // dB += gᵀ · A
                    let av = self.nodes[ai].value.clone();
                    let buf = Self::grad_buf(&mut self.grads, &self.nodes, bi);
                    gemm_tn(n, m, k, g, &av, buf);
                }
            }
            Op::Relu => {
                if wants[0] {
                    let mask: Vec<bool> = self.nodes[inputs[0]]
                        .value
                        .iter()
                        .map(|&x| x > F::zero())
                        .collect();
                    let buf = Self::grad_buf(&mut self.grads, &self.nodes, inputs[0]);
                    for i in 0..buf.len() {
                        if mask[i] {
                            buf[i] += g[i];
                        }
                    }
                }
            }
            Op::Exp => {
                if wants[0] {
                    let yv = self.nodes[id].value.clone();
                    let buf = Self::grad_buf(&mut self.grads, &self.nodes, inputs[0]);
                    for i in 0..buf.len() {
                        buf[i] += g[i] * yv[i];
                    }
                }
            }
            Op::Ln => {
                if wants[0] {
                    let xv = self.nodes[inputs[0]].value.clone();
                    let buf = Self::grad_buf(&mut self.grads, &self.nodes, inputs[0]);
                    for i in 0..buf.len() {
                        buf[i] += g[i] / xv[i];
                    }
                }
            }
            Op::RowSum => {
                if wants[0] {
                    let (r, c) = (
                        self.nodes[inputs[0]].shape[0],
                        self.nodes[inputs[0]].shape[1],
                    );
                    let buf = Self::grad_buf(&mut self.grads, &self.nodes, inputs[0]);
                    for i in 0..r {
                        for j in 0..c {
                            buf[i * c + j] += g[i];
                        }
                    }
                }
            }
            Op::Transpose => {
                if wants[0] {
                    let (r, c) = (
                        self.nodes[inputs[0]].shape[0],
                        self.nodes[inputs[0]].shape[1],
                    );
                    let buf = Self::grad_buf(&mut self.grads, &self.nodes, inputs[0]);
                    for i in 0..r {
                        for j in 0..c {
                            buf[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::ConcatCols => {
                let (ai, bi) = (inputs[0], inputs[1]);
                let r = self.nodes[ai].shape[0];
                let c1 = self.nodes[ai].shape[1];
                let c2 = self.nodes[bi].shape[1];
                if wants[0] {
                    let buf = Self::grad_buf(&mut self.grads, &self.nodes, ai);
                    for i in 0..r {
                        for j in 0..c1 {
                            buf[i * c1 + j] += g[i * (c1 + c2) + j];
                        }
                    }
                }
                if wants[1] {
                    let buf = Self::grad_buf(&mut self.grads, &self.nodes, bi);
                    for i in 0..r {
                        for j in 0..c2 {
                            buf[i * c2 + j] += g[i * (c1 + c2) + c1 + j];
                        }
                    }
                }
            }
            Op::Sum => {
                if wants[0] {
                    let buf = Self::grad_buf(&mut self.grads, &self.nodes, inputs[0]);
                    for d in buf.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::LayerNorm { xhat, inv_std } => {
                let (xi, gi, bi) = (inputs[0], inputs[1], inputs[2]);
                let (r, c) = (self.nodes[id].shape[0], self.nodes[id].shape[1]);
                let xhat = xhat.clone();
                let inv_std = inv_std.clone();
                let gv = self.nodes[gi].value.clone();
                let cf = cast::<F>(c as f64);
                if wants[1] {
                    let buf = Self::grad_buf(&mut self.grads, &self.nodes, gi);
                    for i in 0..r {
                        for j in 0..c {
                            buf[j] += g[i * c + j] * xhat[i * c + j];
                        }
                    }
                }
                if wants[2] {
                    let buf = Self::grad_buf(&mut self.grads, &self.nodes, bi);
                    for i in 0..r {
                        for j in 0..c {
                            buf[j] += g[i * c + j];
                        }
                    }
                }
                if wants[0] {
                    let buf = Self::grad_buf(&mut self.grads, &self.nodes, xi);
                    for i in 0..r {
                        // gh = gamma ⊙ g restricted to this row
                        let mut mean_gh = F::zero();
                        let mut mean_ghx = F::zero();
                        for j in 0..c {
                            let gh = gv[j] * g[i * c + j];
                            mean_gh += gh;
                            mean_ghx += gh * xhat[i * c + j];
                        }
                        mean_gh = mean_gh / cf;
                        mean_ghx = mean_ghx / cf;
                        for j in 0..c {
                            let gh = gv[j] * g[i * c + j];
                            buf[i * c + j] +=
                                inv_std[i] * (gh - mean_gh - xhat[i * c + j] * mean_ghx);
                        }
                    }
                }
            }
            Op::Dropout { factors } => {
                if wants[0] {
                    let factors = factors.clone();
                    let buf = Self::grad_buf(&mut self.grads, &self.nodes, inputs[0]);
                    for i in 0..buf.len() {
                        buf[i] += g[i] * factors[i];
                    }
                }
            }
        }
    }

    fn add_into(dst: &mut [F], src: &[F]) {
        for (d, &s) in dst.iter_mut().zip(src) {
            *d += s;
        }
    }
}

// ── Compositions ───────────────────────────────────────────────────────────────

/// Numerically stable per-row softmax, composed from primitives. The row-max shift
/// is detached, which leaves the value and the Jacobian exactly unchanged.
pub fn softmax_rows<F: Scalar>(g: &mut Graph<F>, x: NodeId) -> NodeId {
    let m = g.row_max_detach(x);
    let sh = g.sub(x, m);
    let e = g.exp(sh);
    let s = g.row_sum(e);
    g.div(e, s)
}

/// Numerically stable per-row log-softmax.
pub fn log_softmax_rows<F: Scalar>(g: &mut Graph<F>, x: NodeId) -> NodeId {
    let m = g.row_max_detach(x);
    let sh = g.sub(x, m);
    let e = g.exp(sh);
    let s = g.row_sum(e);
    let ls = g.ln(s);
    g.sub(sh, ls)
}

/// Mean cross-entropy between logits and one-hot targets: −(1/r) Σ onehot ⊙ logsoftmax.
pub fn cross_entropy_mean<F: Scalar>(g: &mut Graph<F>, logits: NodeId, onehot: NodeId) -> NodeId {
    let r = g.shape(logits)[0];
    let ls = log_softmax_rows(g, logits);
    let picked = g.mul(onehot, ls);
    let total = g.sum(picked);
    g.scale(total, cast::<F>(-1.0 / r as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    // ── Finite-difference oracle ─────────────────────────────────────────────
    //
    // Central differences on every differentiable leaf: the independent check that
    // each backward rule implements the true derivative of its forward rule.

    /// Builds a scalar loss from leaf values handed in as (data, shape, diff) triples.
    type BuildFn = dyn Fn(&mut Graph<f64>, &[NodeId]) -> NodeId;

    fn fd_check(leaves: &[(Vec<f64>, Vec<usize>, bool)], build: &BuildFn, tol: f64) {
        // analytic gradients
        let mut g = Graph::<f64>::new();
        let ids: Vec<NodeId> = leaves
            .iter()
            .map(|(d, s, diff)| g.leaf(d, s, *diff))
            .collect();
        let loss = build(&mut g, &ids);
        assert_eq!(g.value(loss).len(), 1, "loss must be scalar");
        g.backward(loss);

        let eval = |leaves: &[(Vec<f64>, Vec<usize>, bool)]| -> f64 {
            let mut g = Graph::<f64>::new();
            let ids: Vec<NodeId> = leaves
                .iter()
                .map(|(d, s, diff)| g.leaf(d, s, *diff))
                .collect();
            let loss = build(&mut g, &ids);
            g.value(loss)[0]
        };

        for (li, (data, _, diff)) in leaves.iter().enumerate() {
            if !*diff {
                assert!(
                    g.grad(ids[li]).is_none(),
                    "constant leaf {li} must not receive a gradient"
                );
                continue;
            }
            let analytic = g.grad(ids[li]).expect("differentiable leaf has grad");
            for ei in 0..data.len() {
                let h = 1e-5 * data[ei].abs().max(1.0);
                let mut plus = leaves.to_vec();
                plus[li].0[ei] += h;
                let mut minus = leaves.to_vec();
                minus[li].0[ei] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let denom = fd.abs().max(analytic[ei].abs()).max(1.0);
                assert!(
                    (fd - analytic[ei]).abs() / denom < tol,
                    "leaf {li} elem {ei}: analytic {} vs fd {}",
                    analytic[ei],
                    fd
                );
            }
        }
    }

    fn randv(n: usize, rng: &mut impl Rng) -> Vec<f64> {
        // keep magnitudes away from relu kinks and div-by-tiny
        (0..n)
            .map(|_| {
                let v: f64 = rng.gen_range(0.2..1.0);
                if rng.gen::<bool>() {
                    v
                } else {
                    -v
                }
            })
            .collect()
    }

    #[test]
    fn forward_values_elementwise_and_broadcast() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3], false);
        let col = g.leaf(&[10.0, 20.0], &[2, 1], false);
        let row = g.leaf(&[1.0, 2.0, 3.0], &[3], false);
        let s = g.add(a, col);
        assert_eq!(g.value(s), &[11.0, 12.0, 13.0, 24.0, 25.0, 26.0]);
        let p = g.mul(a, row);
        assert_eq!(g.value(p), &[1.0, 4.0, 9.0, 4.0, 10.0, 18.0]);
        let d = g.div(a, col);
        assert_eq!(g.value(d), &[0.1, 0.2, 0.3, 0.2, 0.25, 0.3]);
        let t = g.transpose(a);
        assert_eq!(g.shape(t), &[3, 2]);
        assert_eq!(g.value(t), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let rs = g.row_sum(a);
        assert_eq!(g.value(rs), &[6.0, 15.0]);
        let rm = g.row_max_detach(a);
        assert_eq!(g.value(rm), &[3.0, 6.0]);
        let total = g.sum(a);
        assert_eq!(g.value(total), &[21.0]);
    }

    #[test]
    fn softmax_rows_are_stochastic_and_stable() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&[1000.0, 1001.0, -1000.0, -999.0], &[2, 2], false);
        let sm = softmax_rows(&mut g, x);
        let v = g.value(sm);
        for i in 0..2 {
            let s = v[i * 2] + v[i * 2 + 1];
            assert!((s - 1.0).abs() < 1e-12, "row {i} sums to {s}");
        }
        // both rows have logit gap 1 → identical softmax
        assert!((v[0] - v[2]).abs() < 1e-12);
        assert!((v[0] - 1.0 / (1.0 + 1.0f64.exp())).abs() < 1e-12);
    }

    #[test]
    fn grad_add_mul_div_broadcast() {
        let mut rng = crate::stats::rng_for(5, "gc-bin", 0);
        let leaves = vec![
            (randv(6, &mut rng), vec![2, 3], true),
            (randv(2, &mut rng), vec![2, 1], true),
            (randv(3, &mut rng), vec![3], true),
        ];
        fd_check(
            &leaves,
            &|g, ids| {
                let s = g.add(ids[0], ids[1]);
                let p = g.mul(s, ids[2]);
                let q = g.div(p, ids[1]);
                let r = g.sub(q, ids[0]);
                g.sum(r)
            },
            1e-6,
        );
    }

    #[test]
    fn grad_matmul_both_forms() {
        let mut rng = crate::stats::rng_for(5, "gc-mm", 0);
        let leaves = vec![
            (randv(6, &mut rng), vec![2, 3], true),
            (randv(12, &mut rng), vec![3, 4], true),
            (randv(12, &mut rng), vec![3, 4], false), // constant operand
        ];
        fd_check(
            &leaves,
            &|g, ids| {
                let c = g.matmul(ids[0], ids[1]); // [2,3]·[3,4] → [2,4]
                let d = g.matmul_nt(c, ids[2]); // [2,4]·[3,4]ᵀ → [2,3]
                let sq = g.mul(d, d);
                g.sum(sq)
            },
            1e-6,
        );
    }

    #[test]
    fn grad_matmul_nt_against_explicit_transpose() {
        let mut rng = crate::stats::rng_for(5, "gc-nt", 0);
        let a = randv(8, &mut rng);
        let b = randv(12, &mut rng);
        // loss via matmul_nt
        let mut g1 = Graph::<f64>::new();
        let ia = g1.leaf(&a, &[2, 4], true);
        let ib = g1.leaf(&b, &[3, 4], true);
        let c = g1.matmul_nt(ia, ib);
        let sq = g1.mul(c, c);
        let l = g1.sum(sq);
        g1.backward(l);
        // same loss via transpose + matmul
        let mut g2 = Graph::<f64>::new();
        let ja = g2.leaf(&a, &[2, 4], true);
        let jb = g2.leaf(&b, &[3, 4], true);
        let jt = g2.transpose(jb);
        let c2 = g2.matmul(ja, jt);
        let sq2 = g2.mul(c2, c2);
        let l2 = g2.sum(sq2);
        g2.backward(l2);
        assert_eq!(g1.value(c), g2.value(c2));
        let (ga1, gb1) = (g1.grad(ia).unwrap(), g1.grad(ib).unwrap());
        let (ga2, gb2) = (g2.grad(ja).unwrap(), g2.grad(jb).unwrap());
        for i in 0..ga1.len() {
            assert!((ga1[i] - ga2[i]).abs() < 1e-12);
        }
        for i in 0..gb1.len() {
            assert!((gb1[i] - gb2[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn grad_unary_chain_exp_ln_relu_scale() {
        let mut rng = crate::stats::rng_for(5, "gc-un", 0);
        // strictly positive so ln is safe and relu has no kink ambiguity
        let data: Vec<f64> = (0..6).map(|_| rng.gen_range(0.3..1.5)).collect();
        let leaves = vec![(data, vec![2, 3], true)];
        fd_check(
            &leaves,
            &|g, ids| {
                let e = g.exp(ids[0]);
                let l = g.ln(e);
                let r = g.relu(l);
                let s = g.scale(r, -2.5);
                let rs = g.row_sum(s);
                g.sum(rs)
            },
            1e-6,
        );
    }

    #[test]
    fn grad_concat_transpose_rowsum() {
        let mut rng = crate::stats::rng_for(5, "gc-cat", 0);
        let leaves = vec![
            (randv(6, &mut rng), vec![2, 3], true),
            (randv(4, &mut rng), vec![2, 2], true),
        ];
        fd_check(
            &leaves,
            &|g, ids| {
                let cat = g.concat_cols(ids[0], ids[1]); // [2,5]
                let t = g.transpose(cat); // [5,2]
                let sq = g.mul(t, t);
                let rs = g.row_sum(sq);
                g.sum(rs)
            },
            1e-6,
        );
    }

    #[test]
    fn grad_layer_norm_all_three_inputs() {
        let mut rng = crate::stats::rng_for(5, "gc-ln", 0);
        let leaves = vec![
            (randv(8, &mut rng), vec![2, 4], true),
            (randv(4, &mut rng), vec![4], true),
            (randv(4, &mut rng), vec![4], true),
        ];
        fd_check(
            &leaves,
            &|g, ids| {
                let y = g.layer_norm(ids[0], ids[1], ids[2], 1e-5);
                let sq = g.mul(y, y);
                g.sum(sq)
            },
            1e-5,
        );
    }

    #[test]
    fn grad_softmax_and_log_softmax_and_cross_entropy() {
        let mut rng = crate::stats::rng_for(5, "gc-sm", 0);
        let leaves = vec![
            (randv(8, &mut rng), vec![2, 4], true),
            (
                vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0],
                vec![2, 4],
                false,
            ),
        ];
        fd_check(
            &leaves,
            &|g, ids| {
                let sm = softmax_rows(g, ids[0]);
                let picked = g.mul(sm, ids[1]);
                let a = g.sum(picked);
                let ce = cross_entropy_mean(g, ids[0], ids[1]);
                g.add(a, ce)
            },
            1e-6,
        );
    }

    #[test]
    fn cross_entropy_matches_hand_value() {
        // logits [0, ln2] one-hot on second class: CE = −(ln2 − ln(1+2)) = ln(3/2)
        let mut g = Graph::<f64>::new();
        let logits = g.leaf(&[0.0, 2.0f64.ln()], &[1, 2], false);
        let onehot = g.leaf(&[0.0, 1.0], &[1, 2], false);
        let ce = cross_entropy_mean(&mut g, logits, onehot);
        assert!((g.value(ce)[0] - (1.5f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn dropout_train_semantics_and_gradient_mask() {
        let mut rng = crate::stats::rng_for(5, "drop", 0);
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&vec![1.0; 1000], &[1000], true);
        let d = g.dropout(x, 0.5, &mut rng);
        let s = g.sum(d);
        g.backward(s);
        let v = g.value(d).to_vec();
        let kept = v.iter().filter(|&&x| x != 0.0).count();
        // survivors scaled to 1/(1−p) = 2
        assert!(v.iter().all(|&x| x == 0.0 || (x - 2.0).abs() < 1e-12));
        // keep count near 500 (binomial, ±5σ ≈ 79)
        assert!((kept as i64 - 500).abs() < 80, "kept {kept}");
        let gr = g.grad(x).unwrap();
        for i in 0..1000 {
            let expect = if v[i] == 0.0 { 0.0 } else { 2.0 };
            assert_eq!(gr[i], expect);
        }
    }

    #[test]
    fn gradients_accumulate_across_reuse() {
        // y = x·x (same node twice) → dy/dx = 2x
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&[3.0], &[1], true);
        let y = g.mul(x, x);
        g.backward(y);
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    #[should_panic(expected = "backward already ran")]
    fn second_backward_panics() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&[1.0], &[1], true);
        let y = g.mul(x, x);
        g.backward(y);
        g.backward(y);
    }

    #[test]
    fn constants_receive_no_gradient_and_detach_blocks_flow() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&[1.0, 2.0], &[1, 2], true);
        let c = g.leaf(&[5.0, 5.0], &[1, 2], false);
        let m = g.row_max_detach(x); // detached path
        let a = g.add(x, c);
        let b = g.mul(a, m);
        let l = g.sum(b);
        g.backward(l);
        assert!(g.grad(c).is_none());
        // gradient through the detach is the detached VALUE (2.0), not value+dmax
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
    }
}
