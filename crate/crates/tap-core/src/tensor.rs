//! Dense row-major tensors and the broadcasting rules shared by the graph engine.
//!
//! `Tensor` is plain storage (value + optional gradient accumulator); all operator
//! semantics live in [`crate::graph`]. Broadcasting follows trailing-dimension
//! alignment: shapes are compared right-to-left, and each pair of dimensions must be
//! equal or one of them 1. Gradients of broadcast operands are reduced (summed) back
//! over the expanded axes.

use crate::scalar::Scalar;

// ── Shape helpers ─────────────────────────────────────────────────────────────

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides (in elements) for a shape.
pub fn strides_for(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![0; shape.len()];
    let mut acc = 1;
    for (i, &d) in shape.iter().enumerate().rev() {
        s[i] = acc;
        acc *= d;
    }
    s
}

/// Trailing-aligned broadcast of two shapes; `None` when incompatible.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![1; rank];
    for i in 0..rank {
        let da = if i < a.len() { a[a.len() - 1 - i] } else { 1 };
        let db = if i < b.len() { b[b.len() - 1 - i] } else { 1 };
        out[rank - 1 - i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return None;
        };
    }
    Some(out)
}

/// Strides for reading an operand of shape `shape` at indices of the broadcast
/// output shape `out`: broadcast axes get stride 0.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let native = strides_for(shape);
    let mut s = vec![0; out.len()];
    for i in 0..out.len() {
        let j = i + shape.len();
        if j >= out.len() {
            let j = j - out.len();
            if shape[j] != 1 {
                s[i] = native[j];
            }
        }
    }
    s
}

/// Visit every element of the broadcast output shape, yielding
/// (output linear index, a linear index, b linear index).
///
/// Fast paths cover the cases the training loop actually hits (identical shapes,
/// row-vector and column-vector broadcast over a matrix); the generic strided walk
/// handles everything else.
pub fn for_each_broadcast<Fv: FnMut(usize, usize, usize)>(
    a_shape: &[usize],
    b_shape: &[usize],
    out_shape: &[usize],
    mut f: Fv,
) {
    let n = numel(out_shape);
    if a_shape == b_shape {
        for o in 0..n {
            f(o, o, o);
        }
        return;
    }
    if out_shape.len() == 2 {
        let (r, c) = (out_shape[0], out_shape[1]);
        // matrix ⊕ column [r,1]
        if a_shape == [r, c] && (b_shape == [r, 1] || (b_shape.len() == 2 && b_shape == [r, 1])) {
            for i in 0..r {
                for j in 0..c {
                    f(i * c + j, i * c + j, i);
                }
            }
            return;
        }
        // matrix ⊕ row ([1,c] or [c])
        if a_shape == [r, c] && (b_shape == [1, c] || b_shape == [c]) {
            for i in 0..r {
                for j in 0..c {
                    f(i * c + j, i * c + j, j);
                }
            }
            return;
        }
        // column ⊕ matrix / row ⊕ matrix (mirror)
        if b_shape == [r, c] && (a_shape == [r, 1] || a_shape == [1, c] || a_shape == [c]) {
            let a_is_col = a_shape == [r, 1];
            for i in 0..r {
                for j in 0..c {
                    f(i * c + j, if a_is_col { i } else { j }, i * c + j);
                }
            }
            return;
        }
    }
    // generic strided walk
    let sa = broadcast_strides(a_shape, out_shape);
    let sb = broadcast_strides(b_shape, out_shape);
    let mut idx = vec![0usize; out_shape.len()];
    let mut ia = 0usize;
    let mut ib = 0usize;
    for o in 0..n {
        f(o, ia, ib);
        // increment multi-index (row-major, last axis fastest)
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            ia += sa[ax];
            ib += sb[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
            ia -= sa[ax] * out_shape[ax];
            ib -= sb[ax] * out_shape[ax];
        }
    }
}

// ── Tensor ────────────────────────────────────────────────────────────────────

/// Dense row-major tensor with an optional gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F: Scalar> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
    pub grad: Option<Vec<F>>,
    pub requires_grad: bool,
}

impl<F: Scalar> Tensor<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![F::zero(); numel(shape)],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn from_vec(data: Vec<F>, shape: &[usize]) -> Self {
        assert_eq!(
            data.len(),
            numel(shape),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(x: F) -> Self {
        Tensor::from_vec(vec![x], &[1])
    }

    /// Builder-style flag for trainable parameters.
    pub fn requires_grad(mut self, yes: bool) -> Self {
        self.requires_grad = yes;
        if yes && self.grad.is_none() {
            self.grad = Some(vec![F::zero(); self.data.len()]);
        }
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        assert_eq!(self.rank(), 2, "rows() needs a rank-2 tensor");
        self.shape[0]
    }

    /// Columns of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        assert_eq!(self.rank(), 2, "cols() needs a rank-2 tensor");
        self.shape[1]
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|x| *x = F::zero());
        }
    }

    /// Add a gradient contribution (shape-checked against the value).
    pub fn accumulate_grad(&mut self, g: &[F]) {
        assert_eq!(g.len(), self.data.len(), "gradient length mismatch");
        let slot = self
            .grad
            .get_or_insert_with(|| vec![F::zero(); self.data.len()]);
        for (d, s) in slot.iter_mut().zip(g) {
            *d += *s;
        }
    }
}

/// Sum a gradient of shape `from` (a broadcast output) back down to shape `to`.
pub fn reduce_grad_to<F: Scalar>(grad: &[F], from: &[usize], to: &[usize]) -> Vec<F> {
    assert_eq!(grad.len(), numel(from));
    if from == to {
        return grad.to_vec();
    }
    let mut out = vec![F::zero(); numel(to)];
    // reuse the broadcast walker with the target as operand A
    for_each_broadcast(to, from, from, |_, ia, ob| {
        out[ia] += grad[ob];
    });
    out
}
