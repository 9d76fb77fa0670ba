//! Isotropic shift-invariant kernels with the determinant-normalized bandwidth
//! convention, kernel moment constants, bandwidth schedules, and kernel density
//! estimation.
//!
//! Convention note (deliberate and load-bearing): the kernel argument is scaled by
//! the **determinant** `|H| = h^d`, not by `h` per axis:
//! `k_H(x, y) = (1/|H|) · k((x − y)/|H|)`. The asymptotic bias exponent `h^{2d}`
//! verified by the [`crate::nw`] laboratory follows from exactly this scaling, so a
//! conventional per-axis mode is intentionally not offered. At `d = 1` the two
//! conventions coincide.

use crate::error::{Result, TapError};
use crate::scalar::{cast, Scalar};
use crate::stats::logsumexp;

/// When every log-kernel value in a sum sits below this exponent, sums are
/// evaluated in log space to avoid an all-zero denominator.
pub const LOG_SPACE_THRESHOLD: f64 = -50.0;

// ── Bandwidth ─────────────────────────────────────────────────────────────────

/// Scalar bandwidth `h` in ambient dimension `d`, with `det = h^d`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bandwidth<F: Scalar> {
    h: F,
    d: usize,
    det: F,
}

impl<F: Scalar> Bandwidth<F> {
    /// `det` is accumulated by repeated multiplication so that it is exactly the
    /// product the estimator formulas divide by.
    pub fn new(h: F, d: usize) -> Self {
        assert!(h > F::zero(), "bandwidth must be positive");
        assert!(d >= 1, "dimension must be positive");
        let mut det = F::one();
        for _ in 0..d {
            det = det * h;
        }
        Bandwidth { h, d, det }
    }

    pub fn h(&self) -> F {
        self.h
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    /// `|H| = h^d`.
    pub fn det(&self) -> F {
        self.det
    }
}

// ── Kernel family and constants ───────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelFamily {
    /// Standard-normal density in `d` dimensions. The only family shipped: it is a
    /// bounded symmetric probability density with unit mass, zero first moment and
    /// finite second moment, and no other kernel appears in any experiment.
    Gaussian,
}

/// Moment constants of the base kernel: `∫ x xᵀ k(x) dx = μ₂(k)·I` and
/// `R(k) = ∫ k²(x) dx`, for the dimension they were computed in.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct KernelConstants {
    pub mu2: f64,
    pub rk: f64,
    pub d: usize,
}

/// A kernel family together with its precomputed constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub constants: KernelConstants,
}

impl KernelSpec {
    pub fn gaussian(d: usize) -> Self {
        KernelSpec {
            family: KernelFamily::Gaussian,
            constants: kernel_constants(KernelFamily::Gaussian, d),
        }
    }

    pub fn dim(&self) -> usize {
        self.constants.d
    }
}

/// Closed-form constants: Gaussian has `μ₂ = 1` in any dimension and
/// `R(k) = (2√π)^{−d}` (accumulated by repeated multiplication).
pub fn kernel_constants(family: KernelFamily, d: usize) -> KernelConstants {
    assert!(d >= 1, "dimension must be positive");
    match family {
        KernelFamily::Gaussian => {
            let per_axis = 1.0 / (2.0 * std::f64::consts::PI.sqrt());
            let mut rk = 1.0;
            for _ in 0..d {
                rk *= per_axis;
            }
            KernelConstants { mu2: 1.0, rk, d }
        }
    }
}

// ── Kernel evaluation ─────────────────────────────────────────────────────────

/// Natural logarithm of `k_H(x, y)`; always finite for finite inputs, which makes
/// it the stable building block for kernel sums.
pub fn log_kernel_eval<F: Scalar>(spec: &KernelSpec, bw: &Bandwidth<F>, x: &[F], y: &[F]) -> F {
    assert_eq!(
        x.len(),
        bw.dim(),
        "kernel_eval: x has length {}, bandwidth dimension is {}",
        x.len(),
        bw.dim()
    );
    assert_eq!(
        y.len(),
        bw.dim(),
        "kernel_eval: y has length {}, bandwidth dimension is {}",
        y.len(),
        bw.dim()
    );
    assert!(
        x.iter().chain(y.iter()).all(|v| v.is_finite()),
        "kernel_eval requires finite inputs"
    );
    match spec.family {
        KernelFamily::Gaussian => {
            let mut sq = F::zero();
            for i in 0..x.len() {
                let diff = x[i] - y[i];
                sq += diff * diff;
            }
            let det = bw.det();
            let d = bw.dim() as f64;
            let half = cast::<F>(0.5);
            let log_norm = cast::<F>(-0.5 * d * (2.0 * std::f64::consts::PI).ln());
            log_norm - det.ln() - half * sq / (det * det)
        }
    }
}

/// `k_H(x, y) = (1/|H|) · k((x − y)/|H|)` with `k` the standard-normal density.
pub fn kernel_eval<F: Scalar>(spec: &KernelSpec, bw: &Bandwidth<F>, x: &[F], y: &[F]) -> F {
    log_kernel_eval(spec, bw, x, y).exp()
}

// ── Bandwidth schedules ───────────────────────────────────────────────────────

/// How `h` shrinks with the reference-sample size `n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScheduleMode {
    /// The attention normalization heuristic: `h = √d · n^{−1/d}`.
    ///
    /// Note: this makes `n·h^d` *constant* rather than divergent — it sits on the
    /// boundary of the consistency conditions rather than strictly inside them.
    /// Implemented literally as the experiments use it.
    PaperAttention,
    /// `h = c · n^{−α}`, valid for `α ∈ (0, 1/d)` so that `h → 0` and `n h^d → ∞`.
    TheoremRate { alpha: f64, c: f64 },
}

impl ScheduleMode {
    pub fn theorem_rate(alpha: f64) -> Self {
        ScheduleMode::TheoremRate { alpha, c: 1.0 }
    }
}

/// Bandwidth for `n` reference points in dimension `d` under a schedule.
pub fn bandwidth_schedule<F: Scalar>(
    n: usize,
    d: usize,
    mode: ScheduleMode,
) -> Result<Bandwidth<F>> {
    if n < 1 || d < 1 {
        return Err(TapError::Config(format!(
            "bandwidth_schedule needs n ≥ 1 and d ≥ 1 (got n={n}, d={d})"
        )));
    }
    let nf = n as f64;
    let df = d as f64;
    let h = match mode {
        ScheduleMode::PaperAttention => df.sqrt() * nf.powf(-1.0 / df),
        ScheduleMode::TheoremRate { alpha, c } => {
            if !(alpha > 0.0 && alpha < 1.0 / df) {
                return Err(TapError::Config(format!(
                    "theorem_rate α must lie in (0, 1/d) = (0, {:.6}) so that h → 0 \
                     and n·h^d → ∞ (consistency conditions); got α={alpha}",
                    1.0 / df
                )));
            }
            if c <= 0.0 {
                return Err(TapError::Config(format!(
                    "theorem_rate prefactor c must be positive (got {c})"
                )));
            }
            c * nf.powf(-alpha)
        }
    };
    Ok(Bandwidth::new(cast::<F>(h), d))
}

// ── Kernel density estimation ─────────────────────────────────────────────────

/// KDE at `query` from `refs` (row-major `n×d`): the arithmetic mean of
/// `k_H(query, ref_i)`. Switches to a log-space evaluation when every term's
/// exponent is below [`LOG_SPACE_THRESHOLD`].
pub fn kde<F: Scalar>(spec: &KernelSpec, bw: &Bandwidth<F>, query: &[F], refs: &[F]) -> F {
    let d = bw.dim();
    assert!(!refs.is_empty(), "kde requires a non-empty reference set");
    assert_eq!(refs.len() % d, 0, "reference matrix is not n×{d}");
    let n = refs.len() / d;
    let logs: Vec<F> = (0..n)
        .map(|i| log_kernel_eval(spec, bw, query, &refs[i * d..(i + 1) * d]))
        .collect();
    let max = logs.iter().copied().fold(F::neg_infinity(), F::max);
    if max < cast::<F>(LOG_SPACE_THRESHOLD) {
        // log-space: exp(logsumexp − ln n), never an all-zero sum
        (logsumexp(&logs) - cast::<F>((n as f64).ln())).exp()
    } else {
        let sum: F = logs.iter().map(|&l| l.exp()).sum();
        sum / cast::<F>(n as f64)
    }
}
