//! Dense row-major matrix kernels shared by the differentiable ops.

use crate::Real;

/// `out[m×n] += a[m×k] · b[k×n]`, all row-major and contiguous.
///
/// The i-k-j loop order keeps the innermost loop on contiguous rows of `b`
/// and `out` so it vectorizes.
pub(crate) fn gemm_acc<S: Real>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

pub(crate) fn gemm<S: Real>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    gemm_acc(a, b, &mut out, m, k, n);
    out
}

/// Row-major transpose of an `rows × cols` matrix.
pub(crate) fn transpose<S: Real>(a: &[S], rows: usize, cols: usize) -> Vec<S> {
    debug_assert_eq!(a.len(), rows * cols);
    let mut out = vec![S::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}
