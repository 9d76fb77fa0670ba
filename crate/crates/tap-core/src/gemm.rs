//! Dense row-major matrix-multiply kernels.
//!
//! All three entry points **accumulate** (`C += …`); callers zero the output first
//! when they want a plain product. The kernels are written so LLVM can keep the
//! inner loops in vector registers (4-row broadcast-FMA streams for the `nn`/`tn`
//! forms, 8-lane fixed-association accumulators for the `nt` dot form). Summation
//! order is fixed by the code, never by the optimizer, so results are
//! bitwise-reproducible for a given build.
//!
//! Shapes (row-major, lengths asserted):
//! - `gemm_nn`: `C[m×n] += A[m×k] · B[k×n]`
//! - `gemm_nt`: `C[m×n] += A[m×k] · B[n×k]ᵀ`   (dot products of rows)
//! - `gemm_tn`: `C[m×n] += A[k×m]ᵀ · B[k×n]`   (outer products of rows)

use crate::scalar::Scalar;

/// `C[m×n] += A[m×k] · B[k×n]`.
pub fn gemm_nn<F: Scalar>(m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F]) {
    assert_eq!(a.len(), m * k, "gemm_nn: A length");
    assert_eq!(b.len(), k * n, "gemm_nn: B length");
    assert_eq!(c.len(), m * n, "gemm_nn: C length");
    let mut i = 0;
    // 4-row blocks: each B row is loaded once per four C rows.
    while i + 4 <= m {
        let (c01, c23) = c[i * n..(i + 4) * n].split_at_mut(2 * n);
        let (c0, c1) = c01.split_at_mut(n);
        let (c2, c3) = c23.split_at_mut(n);
        for p in 0..k {
            let a0 = a[i * k + p];
            let a1 = a[(i + 1) * k + p];
            let a2 = a[(i + 2) * k + p];
            let a3 = a[(i + 3) * k + p];
            let br = &b[p * n..p * n + n];
            for j in 0..n {
                let bv = br[j];
                c0[j] += a0 * bv;
                c1[j] += a1 * bv;
                c2[j] += a2 * bv;
                c3[j] += a3 * bv;
            }
        }
        i += 4;
    }
    while i < m {
        let ci = &mut c[i * n..i * n + n];
        for p in 0..k {
            let av = a[i * k + p];
            let br = &b[p * n..p * n + n];
            for j in 0..n {
                ci[j] += av * br[j];
            }
        }
        i += 1;
    }
}

/// `C[m×n] += A[m×k] · B[n×k]ᵀ`: `C[i][j] = Σ_p A[i][p]·B[j][p]`.
///
/// Packs `Bᵀ` once with a blocked transpose and reuses the streaming [`gemm_nn`]
/// kernel: the straight dot-product form runs at a fraction of `nn`'s throughput
/// on long rows, and the packing cost is negligible next to the multiply.
/// Summation order per output element is `p` ascending (single accumulator),
/// identical to [`gemm_nn`].
pub fn gemm_nt<F: Scalar>(m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F]) {
    assert_eq!(a.len(), m * k, "gemm_nt: A length");
    assert_eq!(b.len(), n * k, "gemm_nt: B length");
    assert_eq!(c.len(), m * n, "gemm_nt: C length");
    let mut bt = vec![F::zero(); k * n];
    const T: usize = 32;
    let mut j0 = 0;
    while j0 < n {
        let jl = (j0 + T).min(n);
        let mut p0 = 0;
        while p0 < k {
            let pl = (p0 + T).min(k);
            for j in j0..jl {
                for p in p0..pl {
                    bt[p * n + j] = b[j * k + p];
                }
            }
            p0 = pl;
        }
        j0 = jl;
    }
    gemm_nn(m, k, n, a, &bt, c);
}

/// `C[m×n] += A[k×m]ᵀ · B[k×n]`: `C[i][j] = Σ_p A[p][i]·B[p][j]`.
///
/// Streams row pairs of A and B; C must be small enough to live in cache (true for
/// every gradient buffer in this crate).
pub fn gemm_tn<F: Scalar>(m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F]) {
    assert_eq!(a.len(), k * m, "gemm_tn: A length");
    assert_eq!(b.len(), k * n, "gemm_tn: B length");
    assert_eq!(c.len(), m * n, "gemm_tn: C length");
    for p in 0..k {
        let ar = &a[p * m..p * m + m];
        let br = &b[p * n..p * n + n];
        let mut i = 0;
        while i + 4 <= m {
            let a0 = ar[i];
            let a1 = ar[i + 1];
            let a2 = ar[i + 2];
            let a3 = ar[i + 3];
            let (c01, c23) = c[i * n..(i + 4) * n].split_at_mut(2 * n);
            let (c0, c1) = c01.split_at_mut(n);
            let (c2, c3) = c23.split_at_mut(n);
            for j in 0..n {
                let bv = br[j];
                c0[j] += a0 * bv;
                c1[j] += a1 * bv;
                c2[j] += a2 * bv;
                c3[j] += a3 * bv;
            }
            i += 4;
        }
        while i < m {
            let av = ar[i];
            let ci = &mut c[i * n..i * n + n];
            for j in 0..n {
                ci[j] += av * br[j];
            }
            i += 1;
        }
    }
}
