//! Small statistics and RNG-derivation toolbox shared by the estimator lab, the
//! training loop and the experiment runner.
//!
//! Everything here is deterministic: seed derivation is a pure function of
//! (master seed, purpose string, index), so any component can reconstruct its RNG
//! stream without global state, and per-run streams are independent of scheduling.

use crate::scalar::Scalar;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

// ── Seed derivation ──────────────────────────────────────────────────────────

/// SplitMix64 step: the standard 64-bit finalizer used to decorrelate seeds.
#[inline]
pub fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a hash of a byte string (used to fold purpose labels into seeds).
#[inline]
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Derive a child seed from a master seed, a purpose label and an index.
///
/// The mapping is stable across runs and platforms; it is part of the
/// reproducibility contract (identical master seed ⇒ identical child streams).
pub fn derive_seed(master: u64, purpose: &str, index: u64) -> u64 {
    let h = fnv1a(purpose.as_bytes());
    splitmix64(splitmix64(master ^ h).wrapping_add(index))
}

/// ChaCha8 RNG for a (master, purpose, index) triple.
pub fn rng_for(master: u64, purpose: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, purpose, index))
}

// ── Descriptive statistics (f64 reporting precision) ────────────────────────

pub fn mean(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty(), "mean of empty slice");
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance (ddof = 1). Returns 0 for a single observation.
pub fn sample_var(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

pub fn sample_std(xs: &[f64]) -> f64 {
    sample_var(xs).sqrt()
}

/// Standard error of the mean.
pub fn std_err(xs: &[f64]) -> f64 {
    sample_std(xs) / (xs.len() as f64).sqrt()
}

/// Standard error of a difference of two independent sample means.
pub fn two_sample_se(a: &[f64], b: &[f64]) -> f64 {
    (sample_var(a) / a.len() as f64 + sample_var(b) / b.len() as f64).sqrt()
}

/// One-sample t statistic for H0: mean = mu0.
pub fn t_statistic(xs: &[f64], mu0: f64) -> f64 {
    let se = std_err(xs);
    assert!(se > 0.0, "t statistic undefined for zero-variance sample");
    (mean(xs) - mu0) / se
}

// ── Ordinary least squares on (x, y) pairs ───────────────────────────────────

/// Least-squares line fit; returns (slope, intercept).
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    assert_eq!(xs.len(), ys.len());
    assert!(xs.len() >= 2, "need at least two points to fit a line");
    let mx = mean(xs);
    let my = mean(ys);
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    assert!(sxx > 0.0, "degenerate fit: all x identical");
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

// ── Student-t critical values ────────────────────────────────────────────────

/// Two-sided critical values at fixed significance levels, tabulated at standard
/// degrees of freedom and interpolated linearly in 1/df between entries. The
/// estimator lab's default configuration (50 trials ⇒ df = 49) hits a table row
/// exactly. Supported alphas: 0.01 and 0.05.
pub fn t_critical_two_sided(df: usize, alpha: f64) -> f64 {
    assert!(df >= 1, "degrees of freedom must be positive");
    // (df, alpha = 0.01, alpha = 0.05)
    const TABLE: &[(f64, f64, f64)] = &[
        (1.0, 63.657, 12.706),
        (2.0, 9.925, 4.303),
        (4.0, 4.604, 2.776),
        (9.0, 3.250, 2.262),
        (19.0, 2.861, 2.093),
        (29.0, 2.756, 2.045),
        (49.0, 2.680, 2.010),
        (99.0, 2.626, 1.984),
        (f64::INFINITY, 2.576, 1.960),
    ];
    let pick = |row: &(f64, f64, f64)| -> f64 {
        if (alpha - 0.01).abs() < 1e-12 {
            row.1
        } else if (alpha - 0.05).abs() < 1e-12 {
            row.2
        } else {
            panic!("unsupported alpha {alpha}; tabulated: 0.01, 0.05")
        }
    };
    let d = df as f64;
    for w in TABLE.windows(2) {
        let (lo, hi) = (&w[0], &w[1]);
        if d <= lo.0 {
            return pick(lo);
        }
        if d < hi.0 {
            // interpolate in 1/df (critical values are near-linear in 1/df)
            let x = 1.0 / d;
            let x0 = 1.0 / lo.0;
            let x1 = if hi.0.is_infinite() { 0.0 } else { 1.0 / hi.0 };
            let t = (x - x0) / (x1 - x0);
            return pick(lo) + t * (pick(hi) - pick(lo));
        }
    }
    pick(TABLE.last().unwrap())
}

// ── Numerically safe reductions (scalar-generic; used in hot paths) ─────────

/// log(Σ exp(x_i)) computed with the max-shift trick; exact for empty-free input.
pub fn logsumexp<F: Scalar>(xs: &[F]) -> F {
    assert!(!xs.is_empty(), "logsumexp of empty slice");
    let m = xs.iter().copied().fold(F::neg_infinity(), F::max);
    if m.is_infinite() && m < F::zero() {
        return F::neg_infinity(); // all -inf
    }
    let sum: F = xs.iter().map(|&x| (x - m).exp()).sum();
    m + sum.ln()
}
