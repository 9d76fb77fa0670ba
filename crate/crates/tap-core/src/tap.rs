//! The attention patch: kernelized cross-attention over a frozen unlabeled
//! reference bank.
//!
//! For a query row x and reference rows z′_i,
//!
//! ```text
//! TAP(x) = Σᵢ w_i · (W_v z′_i),   w_i = k(W_q x, W_k z′_i) / Σⱼ k(W_q x, W_k z′_j)
//! ```
//!
//! with a Gaussian kernel `k(q, k′) = exp(−‖q − k′‖² / (2·norm_const))`. The
//! scalar `norm_const` is a softmax temperature: it divides the logits linearly,
//! so the `q·k′` term carries the familiar `exp(q·k′/c)` dot-product-attention
//! scaling with `c ≈ √d_h` (deliberately *not* the determinant convention of
//! [`crate::kernel`], which belongs to the regression theory side). Weights are
//! computed on the tape via a detached row-max shift, so
//! the softmax is exact and immune to underflow. The bank never receives
//! gradients; the trainable pieces are `W_q`, `W_k`, `W_v` and the output layer
//! norm.

use crate::error::{Result, TapError};
use crate::graph::{Graph, NodeId};
use crate::scalar::{cast, Scalar};
use crate::stats;
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Normal};

// ── Reference bank ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BankMode {
    Real,
    /// Column-wise moment-matched Gaussian noise (the control-group bank).
    Noise,
}

/// Frozen reference matrix Z′ (n′_z × d_z) partitioned into contiguous batches.
/// The last batch may be short; every row belongs to exactly one batch.
#[derive(Debug, Clone)]
pub struct ReferenceBank<F: Scalar> {
    z: Vec<F>,
    rows: usize,
    dim: usize,
    batch_size: usize,
    mode: BankMode,
}

impl<F: Scalar> ReferenceBank<F> {
    pub fn new(z: Vec<F>, rows: usize, dim: usize, batch_size: usize) -> Result<Self> {
        if rows == 0 || dim == 0 || z.len() != rows * dim {
            return Err(TapError::Data(format!(
                "reference bank shape invalid: {} values for {rows}×{dim}",
                z.len()
            )));
        }
        if batch_size == 0 {
            return Err(TapError::Config("reference batch size must be ≥ 1".into()));
        }
        if !z.iter().all(|v| v.is_finite()) {
            return Err(TapError::Data(
                "reference bank contains non-finite entries".into(),
            ));
        }
        Ok(ReferenceBank {
            z,
            rows,
            dim,
            batch_size: batch_size.min(rows),
            mode: BankMode::Real,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn mode(&self) -> BankMode {
        self.mode
    }

    pub fn data(&self) -> &[F] {
        &self.z
    }

    /// Number of contiguous batches `m = ⌈rows / batch_size⌉`.
    pub fn num_batches(&self) -> usize {
        self.rows.div_ceil(self.batch_size)
    }

    /// Row range of batch `i`.
    pub fn batch_range(&self, i: usize) -> std::ops::Range<usize> {
        assert!(i < self.num_batches(), "batch index out of range");
        let start = i * self.batch_size;
        start..((i + 1) * self.batch_size).min(self.rows)
    }

    /// Batch `i` as (row-major values, row count).
    pub fn batch(&self, i: usize) -> (&[F], usize) {
        let r = self.batch_range(i);
        (&self.z[r.start * self.dim..r.end * self.dim], r.len())
    }

    /// Column-wise moment-matched Gaussian noise bank with the same shape and
    /// batching (sample mean and ddof-1 standard deviation per column; a constant
    /// column is reproduced exactly). Fresh draws per seed.
    pub fn make_noise_bank(&self, seed: u64) -> ReferenceBank<F> {
        let mut rng = stats::rng_for(seed, "noise-bank", 0);
        let mut out = vec![F::zero(); self.z.len()];
        for c in 0..self.dim {
            let col: Vec<f64> = (0..self.rows)
                .map(|r| self.z[r * self.dim + c].to_f64().unwrap())
                .collect();
            let mean = stats::mean(&col);
            let std = stats::sample_std(&col);
            if std == 0.0 {
                for r in 0..self.rows {
                    out[r * self.dim + c] = cast::<F>(mean);
                }
            } else {
                let dist = Normal::new(mean, std).expect("finite moments");
                for r in 0..self.rows {
                    out[r * self.dim + c] = cast::<F>(dist.sample(&mut rng));
                }
            }
        }
        ReferenceBank {
            z: out,
            rows: self.rows,
            dim: self.dim,
            batch_size: self.batch_size,
            mode: BankMode::Noise,
        }
    }

    /// Same bank re-partitioned with a different batch size.
    pub fn with_batch_size(&self, batch_size: usize) -> Result<ReferenceBank<F>> {
        if batch_size == 0 {
            return Err(TapError::Config("reference batch size must be ≥ 1".into()));
        }
        let mut b = self.clone();
        b.batch_size = batch_size.min(self.rows);
        Ok(b)
    }
}

// ── Trainable parameters ──────────────────────────────────────────────────────

/// Trainable attention parameters plus the output layer norm.
///
/// Orientation: each matrix is stored `[out_dim × in_dim]` so the forward pass is
/// `Q = X·W_qᵀ`, `K = Z·W_kᵀ`, `V = Z·W_vᵀ`. `norm_const` is a fixed
/// hyperparameter (no gradient), defaulting to the `√d_h (n′_z/m)^{−1/d_h}`
/// heuristic.
#[derive(Debug, Clone)]
pub struct TapParams<F: Scalar> {
    pub wq: Tensor<F>,
    pub wk: Tensor<F>,
    pub wv: Tensor<F>,
    pub ln_gamma: Tensor<F>,
    pub ln_beta: Tensor<F>,
    pub norm_const: F,
    pub ln_eps: F,
}

/// Uniform(−1/√fan_in, 1/√fan_in) initialization used across the repository.
pub fn init_matrix<F: Scalar, R: Rng>(out_dim: usize, in_dim: usize, rng: &mut R) -> Tensor<F> {
    let bound = 1.0 / (in_dim as f64).sqrt();
    let data: Vec<F> = (0..out_dim * in_dim)
        .map(|_| cast::<F>(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::from_vec(data, &[out_dim, in_dim]).requires_grad(true)
}

impl<F: Scalar> TapParams<F> {
    /// Deterministic initialization: weights uniform ±1/√fan_in, γ = 1, β = 0.
    pub fn init<R: Rng>(
        d_x: usize,
        d_z: usize,
        d_h: usize,
        d_out: usize,
        norm_const: F,
        rng: &mut R,
    ) -> Self {
        assert!(norm_const > F::zero(), "norm_const must be positive");
        TapParams {
            wq: init_matrix(d_h, d_x, rng),
            wk: init_matrix(d_h, d_z, rng),
            wv: init_matrix(d_out, d_z, rng),
            ln_gamma: Tensor::from_vec(vec![F::one(); d_out], &[d_out]).requires_grad(true),
            ln_beta: Tensor::zeros(&[d_out]).requires_grad(true),
            norm_const,
            ln_eps: cast::<F>(1e-5),
        }
    }

    pub fn d_h(&self) -> usize {
        self.wq.shape[0]
    }

    pub fn d_x(&self) -> usize {
        self.wq.shape[1]
    }

    pub fn d_z(&self) -> usize {
        self.wk.shape[1]
    }

    pub fn d_out(&self) -> usize {
        self.wv.shape[0]
    }

    pub fn param_count(&self) -> usize {
        self.wq.numel()
            + self.wk.numel()
            + self.wv.numel()
            + self.ln_gamma.numel()
            + self.ln_beta.numel()
    }

    /// Mutable references to the trainable tensors, in stable order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<F>> {
        vec![
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.ln_gamma,
            &mut self.ln_beta,
        ]
    }
}

/// The appendix normalization heuristic `√d_h · (n′_z/m)^{−1/d_h}` with the
/// average reference-batch size in the exponent base.
pub fn default_norm_const(d_h: usize, n_ref: usize, m: usize) -> f64 {
    assert!(d_h >= 1 && n_ref >= 1 && m >= 1);
    let avg = n_ref as f64 / m as f64;
    (d_h as f64).sqrt() * avg.powf(-1.0 / d_h as f64)
}

// ── Forward pass on the tape ──────────────────────────────────────────────────

/// Tape handles for one binding of [`TapParams`] onto a graph.
#[derive(Debug, Clone, Copy)]
pub struct TapNodes {
    pub wq: NodeId,
    pub wk: NodeId,
    pub wv: NodeId,
    pub ln_gamma: NodeId,
    pub ln_beta: NodeId,
}

/// Copy the trainable parameters onto the tape. Order matches `params_mut`.
pub fn bind_tap_params<F: Scalar>(g: &mut Graph<F>, p: &TapParams<F>) -> TapNodes {
    TapNodes {
        wq: g.param(&p.wq),
        wk: g.param(&p.wk),
        wv: g.param(&p.wv),
        ln_gamma: g.param(&p.ln_gamma),
        ln_beta: g.param(&p.ln_beta),
    }
}

impl TapNodes {
    pub fn ids(&self) -> Vec<NodeId> {
        vec![self.wq, self.wk, self.wv, self.ln_gamma, self.ln_beta]
    }
}

/// Intermediate handles of one TAP forward pass (exposed for tests/inspection).
#[derive(Debug, Clone, Copy)]
pub struct TapForward {
    /// Row-stochastic attention weights `[b × s]`.
    pub weights: NodeId,
    /// Value rows `W_v z′` `[s × d_out]`.
    pub values: NodeId,
    /// Convex combination before the layer norm `[b × d_out]`.
    pub pre_norm: NodeId,
    /// Final patch output `[b × d_out]`.
    pub out: NodeId,
}

/// Build Eq.-style kernelized cross-attention on the tape.
///
/// `queries` is `[b × d_x]`; `z_batch` is a tape node holding `[s × d_z]`
/// reference rows (a constant leaf when it comes from a bank — gradients then stop
/// there by construction). Squared latent distances are assembled as
/// `‖q‖² + ‖k‖² − 2·q·kᵀ`, scaled by `−1/(2·norm_const)` (temperature reading),
/// and softmax-normalized with a detached row-max shift.
pub fn tap_forward_graph<F: Scalar>(
    g: &mut Graph<F>,
    nodes: &TapNodes,
    norm_const: F,
    ln_eps: F,
    queries: NodeId,
    z_batch: NodeId,
) -> TapForward {
    let s = g.shape(z_batch)[0];
    assert!(s >= 1, "empty reference batch");
    let q = g.matmul_nt(queries, nodes.wq); // [b, d_h]
    let k = g.matmul_nt(z_batch, nodes.wk); // [s, d_h]
    let v = g.matmul_nt(z_batch, nodes.wv); // [s, d_out]

    let qq = g.mul(q, q);
    let q_norms = g.row_sum(qq); // [b, 1]
    let kk = g.mul(k, k);
    let k_norms = g.row_sum(kk); // [s, 1]
    let k_norms_row = g.transpose(k_norms); // [1, s]
    let qk = g.matmul_nt(q, k); // [b, s]
    let minus_two_qk = g.scale(qk, cast::<F>(-2.0));
    let sums = g.add(q_norms, k_norms_row); // broadcast [b,1] + [1,s]
    let sq_dist = g.add(sums, minus_two_qk); // [b, s]

    let inv = cast::<F>(-0.5) / norm_const;
    let scores = g.scale(sq_dist, inv);
    let shift = g.row_max_detach(scores);
    let shifted = g.sub(scores, shift);
    let expd = g.exp(shifted);
    let denom = g.row_sum(expd); // ≥ 1: the max element contributes exp(0) = 1
    let weights = g.div(expd, denom); // [b, s]

    let pre_norm = g.matmul(weights, v); // [b, d_out]
    let out = g.layer_norm(pre_norm, nodes.ln_gamma, nodes.ln_beta, ln_eps);
    TapForward {
        weights,
        values: v,
        pre_norm,
        out,
    }
}

/// Standalone forward pass: binds everything onto a fresh tape and returns the
/// patch output as a tensor. `z_batch` is row-major `[s × d_z]`.
pub fn tap_forward<F: Scalar>(
    params: &TapParams<F>,
    queries: &Tensor<F>,
    z_batch: &[F],
    s: usize,
) -> Tensor<F> {
    assert_eq!(queries.rank(), 2, "queries must be [b × d_x]");
    assert_eq!(queries.cols(), params.d_x(), "query width vs W_q");
    assert_eq!(z_batch.len(), s * params.d_z(), "reference batch shape");
    let mut g = Graph::new();
    let nodes = bind_tap_params(&mut g, params);
    let x = g.constant(queries);
    let z = g.leaf(z_batch, &[s, params.d_z()], false);
    let fwd = tap_forward_graph(&mut g, &nodes, params.norm_const, params.ln_eps, x, z);
    let value = g.value(fwd.out).to_vec();
    Tensor::from_vec(value, &[queries.rows(), params.d_out()])
}

/// Attention weights for a single query, computed directly (no tape): the
/// softmax of `−‖W_q x − W_k z′_i‖² / (2·norm_const)` over the batch rows.
pub fn attention_weights<F: Scalar>(
    params: &TapParams<F>,
    query: &[F],
    z_batch: &[F],
    s: usize,
) -> Vec<F> {
    assert!(s >= 1, "empty reference batch");
    assert_eq!(query.len(), params.d_x(), "query width vs W_q");
    assert_eq!(z_batch.len(), s * params.d_z(), "reference batch shape");
    let (d_h, d_x, d_z) = (params.d_h(), params.d_x(), params.d_z());
    let mut q = vec![F::zero(); d_h];
    for a in 0..d_h {
        let mut acc = F::zero();
        for j in 0..d_x {
            acc += params.wq.data[a * d_x + j] * query[j];
        }
        q[a] = acc;
    }
    let mut logits = vec![F::zero(); s];
    for i in 0..s {
        let zrow = &z_batch[i * d_z..(i + 1) * d_z];
        let mut sq = F::zero();
        for a in 0..d_h {
            let mut k = F::zero();
            for j in 0..d_z {
                k += params.wk.data[a * d_z + j] * zrow[j];
            }
            let diff = q[a] - k;
            sq += diff * diff;
        }
        logits[i] = cast::<F>(-0.5) * sq / params.norm_const;
    }
    let max = logits.iter().copied().fold(F::neg_infinity(), F::max);
    let mut w: Vec<F> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: F = w.iter().copied().sum();
    for v in w.iter_mut() {
        *v = *v / total;
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    fn small_params(seed: u64) -> TapParams<f64> {
        let mut rng = stats::rng_for(seed, "tap-test", 0);
        TapParams::init(3, 4, 2, 3, 0.9, &mut rng)
    }

    fn rand_mat(seed: u64, purpose: &str, n: usize) -> Vec<f64> {
        use rand::Rng;
        let mut rng = stats::rng_for(seed, purpose, 0);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    // ── Brute-force oracle ───────────────────────────────────────────────────
    //
    // Nested-loop evaluation of the attention formula, written without any code
    // shared with the production path.

    fn brute_force_tap(p: &TapParams<f64>, x: &[f64], b: usize, z: &[f64], s: usize) -> Vec<f64> {
        let (dh, dx, dz, dout) = (p.d_h(), p.d_x(), p.d_z(), p.d_out());
        let mut out = vec![0.0; b * dout];
        for bi in 0..b {
            // q = Wq x
            let mut q = vec![0.0; dh];
            for a in 0..dh {
                for j in 0..dx {
                    q[a] += p.wq.data[a * dx + j] * x[bi * dx + j];
                }
            }
            // kernel numerators
            let mut knum = vec![0.0; s];
            for i in 0..s {
                let mut sq = 0.0;
                for a in 0..dh {
                    let mut k = 0.0;
                    for j in 0..dz {
                        k += p.wk.data[a * dz + j] * z[i * dz + j];
                    }
                    sq += (q[a] - k) * (q[a] - k);
                }
                knum[i] = (-0.5 * sq / p.norm_const).exp();
            }
            let denom: f64 = knum.iter().sum();
            // Σ w_i (Wv z_i)
            for i in 0..s {
                let w = knum[i] / denom;
                for o in 0..dout {
                    let mut v = 0.0;
                    for j in 0..dz {
                        v += p.wv.data[o * dz + j] * z[i * dz + j];
                    }
                    out[bi * dout + o] += w * v;
                }
            }
        }
        out
    }

    fn hand_layer_norm(
        x: &[f64],
        rows: usize,
        cols: usize,
        g: &[f64],
        b: &[f64],
        eps: f64,
    ) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        for i in 0..rows {
            let row = &x[i * cols..(i + 1) * cols];
            let mu: f64 = row.iter().sum::<f64>() / cols as f64;
            let var: f64 = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            for j in 0..cols {
                out[i * cols + j] = g[j] * (row[j] - mu) * is + b[j];
            }
        }
        out
    }

    #[test]
    fn matches_brute_force_oracle_to_high_precision() {
        let p = small_params(1);
        let b = 2;
        let s = 3;
        let x = rand_mat(2, "x", b * p.d_x());
        let z = rand_mat(3, "z", s * p.d_z());
        let queries = Tensor::from_vec(x.clone(), &[b, p.d_x()]);
        let got = tap_forward(&p, &queries, &z, s);
        let pre = brute_force_tap(&p, &x, b, &z, s);
        let want = hand_layer_norm(
            &pre,
            b,
            p.d_out(),
            &p.ln_gamma.data,
            &p.ln_beta.data,
            p.ln_eps,
        );
        for i in 0..want.len() {
            let denom = want[i].abs().max(1e-3);
            assert!(
                ((got.data[i] - want[i]) / denom).abs() < 1e-12,
                "elem {i}: {} vs {}",
                got.data[i],
                want[i]
            );
        }
    }

    #[test]
    fn single_reference_gives_normalized_value_for_any_query() {
        let p = small_params(4);
        let z = rand_mat(5, "z1", p.d_z());
        for qseed in 0..3 {
            let x = rand_mat(10 + qseed, "q", 2 * p.d_x());
            let queries = Tensor::from_vec(x, &[2, p.d_x()]);
            let out = tap_forward(&p, &queries, &z, 1);
            // expected: layer_norm(Wv z) independent of the query
            let mut v = vec![0.0; p.d_out()];
            for o in 0..p.d_out() {
                for j in 0..p.d_z() {
                    v[o] += p.wv.data[o * p.d_z() + j] * z[j];
                }
            }
            let want = hand_layer_norm(
                &v,
                1,
                p.d_out(),
                &p.ln_gamma.data,
                &p.ln_beta.data,
                p.ln_eps,
            );
            for r in 0..2 {
                for o in 0..p.d_out() {
                    assert!((out.data[r * p.d_out() + o] - want[o]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn identical_references_collapse_to_single_reference_case() {
        let p = small_params(6);
        let zrow = rand_mat(7, "zr", p.d_z());
        let mut z = Vec::new();
        for _ in 0..4 {
            z.extend_from_slice(&zrow);
        }
        let x = rand_mat(8, "qq", p.d_x());
        let queries = Tensor::from_vec(x, &[1, p.d_x()]);
        let many = tap_forward(&p, &queries, &z, 4);
        let one = tap_forward(&p, &queries, &zrow, 1);
        for i in 0..p.d_out() {
            assert!((many.data[i] - one.data[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences_and_bank_gets_none() {
        let b = 2;
        let s = 3;
        let x = rand_mat(21, "gx", b * 3);
        let z = rand_mat(22, "gz", s * 4);

        let build = |p: &TapParams<f64>| -> (f64, Vec<Vec<f64>>, bool) {
            let mut g = Graph::<f64>::new();
            let nodes = bind_tap_params(&mut g, p);
            let xq = g.leaf(&x, &[b, 3], false);
            let zb = g.leaf(&z, &[s, 4], false);
            let fwd = tap_forward_graph(&mut g, &nodes, p.norm_const, p.ln_eps, xq, zb);
            let sq = g.mul(fwd.out, fwd.out);
            let loss = g.sum(sq);
            g.backward(loss);
            let grads = nodes
                .ids()
                .iter()
                .map(|&id| g.grad(id).expect("trainable").to_vec())
                .collect();
            (g.value(loss)[0], grads, g.grad(zb).is_none())
        };

        let p0 = small_params(20);
        let (_, analytic, bank_clean) = build(&p0);
        assert!(bank_clean, "reference batch must not receive a gradient");

        // central differences over every trainable block
        let blocks: usize = 5;
        for bi in 0..blocks {
            let n = match bi {
                0 => p0.wq.numel(),
                1 => p0.wk.numel(),
                2 => p0.wv.numel(),
                3 => p0.ln_gamma.numel(),
                _ => p0.ln_beta.numel(),
            };
            for ei in 0..n {
                let h = 1e-6;
                let mut pp = p0.clone();
                let mut pm = p0.clone();
                fn slot(p: &mut TapParams<f64>, bi: usize, ei: usize) -> &mut f64 {
                    match bi {
                        0 => &mut p.wq.data[ei],
                        1 => &mut p.wk.data[ei],
                        2 => &mut p.wv.data[ei],
                        3 => &mut p.ln_gamma.data[ei],
                        _ => &mut p.ln_beta.data[ei],
                    }
                }
                *slot(&mut pp, bi, ei) += h;
                *slot(&mut pm, bi, ei) -= h;
                let (lp, _, _) = build(&pp);
                let (lm, _, _) = build(&pm);
                let fd = (lp - lm) / (2.0 * h);
                let an = analytic[bi][ei];
                let denom = fd.abs().max(an.abs()).max(1e-4);
                assert!(
                    ((fd - an) / denom).abs() < 1e-4,
                    "block {bi} elem {ei}: analytic {an} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn attention_weights_sum_to_one_and_respect_symmetry() {
        let p = small_params(30);
        let q = rand_mat(31, "aw", p.d_x());
        let z = rand_mat(32, "az", 5 * p.d_z());
        let w = attention_weights(&p, &q, &z, 5);
        assert_eq!(w.len(), 5);
        assert!(w.iter().all(|&x| x >= 0.0));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        // two references that are equidistant in latent space get equal weight:
        // use identical rows (equidistance by construction)
        let zrow = rand_mat(33, "zr", p.d_z());
        let mut z2 = zrow.clone();
        z2.extend_from_slice(&zrow);
        let w = attention_weights(&p, &q, &z2, 2);
        assert!((w[0] - 0.5).abs() < 1e-12 && (w[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn near_key_dominates_far_key() {
        // construct latent geometry directly: Wq = I (d_x = d_h), Wk = I (d_z = d_h)
        let d = 2;
        let mut p = TapParams::<f64> {
            wq: Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0], &[d, d]).requires_grad(true),
            wk: Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0], &[d, d]).requires_grad(true),
            wv: Tensor::from_vec(vec![1.0; d * d], &[d, d]).requires_grad(true),
            ln_gamma: Tensor::from_vec(vec![1.0; d], &[d]).requires_grad(true),
            ln_beta: Tensor::zeros(&[d]).requires_grad(true),
            norm_const: 1.0,
            ln_eps: 1e-5,
        };
        p.norm_const = 0.8;
        let q = vec![0.0, 0.0];
        // key 1 at the query's latent point, key 2 at distance 5·norm_const
        let far = 5.0 * p.norm_const;
        let z = vec![0.0, 0.0, far, 0.0];
        let w = attention_weights(&p, &q, &z, 2);
        assert!(w[0] > 0.99, "near-key weight {}", w[0]);
    }

    #[test]
    fn permuting_batch_rows_permutes_weights_and_preserves_output() {
        let p = small_params(40);
        let q = rand_mat(41, "pq", p.d_x());
        let z = rand_mat(42, "pz", 4 * p.d_z());
        let w = attention_weights(&p, &q, &z, 4);
        let perm = [2usize, 0, 3, 1];
        let mut zp = vec![0.0; z.len()];
        for (new_i, &old_i) in perm.iter().enumerate() {
            zp[new_i * p.d_z()..(new_i + 1) * p.d_z()]
                .copy_from_slice(&z[old_i * p.d_z()..(old_i + 1) * p.d_z()]);
        }
        let wp = attention_weights(&p, &q, &zp, 4);
        for (new_i, &old_i) in perm.iter().enumerate() {
            assert!((wp[new_i] - w[old_i]).abs() < 1e-12);
        }
        // full forward output is permutation-invariant
        let queries = Tensor::from_vec(q.clone(), &[1, p.d_x()]);
        let a = tap_forward(&p, &queries, &z, 4);
        let b = tap_forward(&p, &queries, &zp, 4);
        for i in 0..a.data.len() {
            assert!((a.data[i] - b.data[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn pre_norm_output_lies_in_value_convex_hull() {
        let p = small_params(50);
        let b = 3;
        let s = 6;
        let x = rand_mat(51, "hx", b * p.d_x());
        let z = rand_mat(52, "hz", s * p.d_z());
        let mut g = Graph::<f64>::new();
        let nodes = bind_tap_params(&mut g, &p);
        let xq = g.leaf(&x, &[b, p.d_x()], false);
        let zb = g.leaf(&z, &[s, p.d_z()], false);
        let fwd = tap_forward_graph(&mut g, &nodes, p.norm_const, p.ln_eps, xq, zb);
        let vals = g.value(fwd.values).to_vec();
        let pre = g.value(fwd.pre_norm).to_vec();
        for o in 0..p.d_out() {
            let lo = (0..s)
                .map(|i| vals[i * p.d_out() + o])
                .fold(f64::INFINITY, f64::min);
            let hi = (0..s)
                .map(|i| vals[i * p.d_out() + o])
                .fold(f64::NEG_INFINITY, f64::max);
            for bi in 0..b {
                let v = pre[bi * p.d_out() + o];
                assert!(v >= lo - 1e-12 && v <= hi + 1e-12, "hull violation {v}");
            }
        }
        // weights row-stochastic on the tape too
        let w = g.value(fwd.weights);
        for bi in 0..b {
            let sum: f64 = (0..s).map(|i| w[bi * s + i]).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn huge_norm_const_flattens_weights_to_uniform() {
        let p = {
            let mut p = small_params(60);
            p.norm_const = 1e6;
            p
        };
        let q = rand_mat(61, "fq", p.d_x());
        let z = rand_mat(62, "fz", 8 * p.d_z());
        let w = attention_weights(&p, &q, &z, 8);
        for &wi in &w {
            assert!((wi - 0.125).abs() < 1e-6, "weight {wi} not ~uniform");
        }
    }

    #[test]
    fn bank_partition_is_disjoint_cover_with_short_tail() {
        let bank = ReferenceBank::new(vec![0.0f64; 10 * 3], 10, 3, 4).unwrap();
        assert_eq!(bank.num_batches(), 3);
        assert_eq!(bank.batch_range(0), 0..4);
        assert_eq!(bank.batch_range(1), 4..8);
        assert_eq!(bank.batch_range(2), 8..10); // short tail kept
        let mut seen = vec![false; 10];
        for i in 0..bank.num_batches() {
            for r in bank.batch_range(i) {
                assert!(!seen[r], "row {r} in two batches");
                seen[r] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
        // batch_size larger than the bank clamps to one full batch
        let bank = ReferenceBank::new(vec![0.0f64; 6], 2, 3, 100).unwrap();
        assert_eq!(bank.num_batches(), 1);
        assert_eq!(bank.batch_range(0), 0..2);
    }

    #[test]
    fn noise_bank_matches_moments_and_is_seed_deterministic() {
        use rand::Rng;
        let rows = 1000;
        let dim = 3;
        let mut rng = stats::rng_for(70, "bank-src", 0);
        let mut z = vec![0.0f64; rows * dim];
        for r in 0..rows {
            z[r * dim] = 5.0 + 2.0 * rng.gen_range(-1.0..1.0f64);
            z[r * dim + 1] = -3.0; // constant column
            z[r * dim + 2] = rng.gen_range(0.0..10.0f64);
        }
        let bank = ReferenceBank::new(z.clone(), rows, dim, 250).unwrap();
        let noise = bank.make_noise_bank(99);
        assert_eq!(noise.mode(), BankMode::Noise);
        assert_eq!(noise.rows(), rows);
        assert_eq!(noise.num_batches(), bank.num_batches());
        for c in 0..dim {
            let src: Vec<f64> = (0..rows).map(|r| z[r * dim + c]).collect();
            let out: Vec<f64> = (0..rows).map(|r| noise.data()[r * dim + c]).collect();
            let (ms, mo) = (stats::mean(&src), stats::mean(&out));
            let (ss, so) = (stats::sample_std(&src), stats::sample_std(&out));
            if ss == 0.0 {
                assert_eq!(src, out, "constant column must be reproduced exactly");
            } else {
                assert!(
                    (mo - ms).abs() / ms.abs().max(1.0) < 0.05,
                    "col {c} mean {mo} vs {ms}"
                );
                assert!((so - ss).abs() / ss < 0.05, "col {c} std {so} vs {ss}");
            }
        }
        // determinism and seed sensitivity
        let again = bank.make_noise_bank(99);
        assert_eq!(noise.data(), again.data());
        let other = bank.make_noise_bank(100);
        assert_ne!(noise.data(), other.data());
    }

    #[test]
    fn default_norm_const_matches_heuristic() {
        // √64 · 250^{−1/64}
        let c = default_norm_const(64, 1000, 4);
        assert!((c - 7.339).abs() < 1e-3, "{c}");
    }

    #[test]
    fn bank_validation_rejects_garbage() {
        assert!(ReferenceBank::<f64>::new(vec![], 0, 3, 1).is_err());
        assert!(ReferenceBank::new(vec![1.0f64; 5], 2, 3, 1).is_err());
        assert!(ReferenceBank::new(vec![f64::NAN; 6], 2, 3, 1).is_err());
        assert!(ReferenceBank::new(vec![1.0f64; 6], 2, 3, 0).is_err());
    }
}
