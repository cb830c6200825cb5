//! Row-major matrix kernels shared by the forward and backward passes.
//!
//! Loop orders keep the innermost loop contiguous in memory so the compiler
//! can vectorize it. Summation order is fixed, so results are deterministic.

const MR: usize = 4;
const NR: usize = 8;

/// Accumulates an `MR × NR` tile of `c` in registers:
/// `c[i][j] += Σ_p a(i, p) · b[p][j]` for `p` ascending, where `a(i, p)` is
/// read through `a_at`. Edge tiles fall back to the same order element-wise.
#[inline(always)]
fn tile<A: Fn(usize, usize) -> f64>(
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
    depth: usize,
    n: usize,
    a_at: &A,
    b: &[f64],
    c: &mut [f64],
) {
    if rows.len() == MR && cols.len() == NR {
        let (i0, j0) = (rows.start, cols.start);
        let mut acc = [[0.0f64; NR]; MR];
        for (r, acc_row) in acc.iter_mut().enumerate() {
            acc_row.copy_from_slice(&c[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR]);
        }
        for p in 0..depth {
            let b_row: &[f64; NR] = b[p * n + j0..p * n + j0 + NR].try_into().expect("NR wide");
            for (r, acc_row) in acc.iter_mut().enumerate() {
                let av = a_at(i0 + r, p);
                for (x, &bv) in acc_row.iter_mut().zip(b_row) {
                    *x += av * bv;
                }
            }
        }
        for (r, acc_row) in acc.iter().enumerate() {
            c[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR].copy_from_slice(acc_row);
        }
    } else {
        for i in rows {
            for j in cols.clone() {
                let mut x = c[i * n + j];
                for p in 0..depth {
                    x += a_at(i, p) * b[p * n + j];
                }
                c[i * n + j] = x;
            }
        }
    }
}

fn tiled<A: Fn(usize, usize) -> f64>(m: usize, depth: usize, n: usize, a_at: A, b: &[f64], c: &mut [f64]) {
    for i0 in (0..m).step_by(MR) {
        let rows = i0..(i0 + MR).min(m);
        for j0 in (0..n).step_by(NR) {
            tile(rows.clone(), j0..(j0 + NR).min(n), depth, n, &a_at, b, c);
        }
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    tiled(m, k, n, |i, p| a[i * k + p], b, c);
}

/// `c[k×n] += a[m×k]ᵀ · b[m×n]`
pub(crate) fn gemm_tn_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    tiled(k, m, n, |p, i| a[i * k + p], b, c);
}

pub(crate) fn transpose(rows: usize, cols: usize, a: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}
