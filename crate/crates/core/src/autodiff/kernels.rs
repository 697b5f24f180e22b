//! Dense kernels behind the tape primitives.
//!
//! Every output element of a matrix product is accumulated over the inner
//! dimension in ascending order starting from zero. Two consequences the
//! rest of the crate relies on:
//!
//! * results do not depend on the thread count (rows are split across
//!   threads, reductions never are);
//! * trailing zero terms in the inner dimension leave a sum bitwise
//!   unchanged, so masked attention over a padded sequence produces exactly
//!   the same valid-position values as over the unpadded one.

use rayon::prelude::*;

use crate::tensor::Real;

/// Work (m·k·n) below which a product runs on the calling thread.
const PAR_THRESHOLD: usize = 1 << 16;

const ROWS: usize = 4;
const COLS: usize = 8;

/// Row-major transpose of an `rows × cols` matrix.
pub fn transpose<T: Real>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), rows * cols);
    let mut out = vec![T::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// `C = op(A) · op(B)` where `op(A)` is `m × k` and `op(B)` is `k × n`.
/// `ta` means `a` is stored as `k × m`; `tb` means `b` is stored `n × k`.
pub fn matmul<T: Real>(
    a: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let a_owned;
    let a = if ta {
        a_owned = transpose(a, k, m);
        &a_owned[..]
    } else {
        a
    };
    let b_owned;
    let b = if tb {
        b_owned = transpose(b, n, k);
        &b_owned[..]
    } else {
        b
    };
    let mut c = vec![T::zero(); m * n];
    if n == 0 || m == 0 {
        return c;
    }
    // Output tiles of ROWS x COLS stay in registers across the whole inner
    // dimension. Every element still sums its k terms in ascending order.
    let block = |(bi, cblock): (usize, &mut [T])| {
        let i0 = bi * ROWS;
        let rows = cblock.len() / n;
        if rows == ROWS {
            let mut j0 = 0;
            while j0 + COLS <= n {
                let mut acc = [[T::zero(); COLS]; ROWS];
                for p in 0..k {
                    let bv: &[T; COLS] = b[p * n + j0..p * n + j0 + COLS].try_into().unwrap();
                    for (r, accr) in acc.iter_mut().enumerate() {
                        let x = a[(i0 + r) * k + p];
                        for j in 0..COLS {
                            accr[j] = accr[j] + x * bv[j];
                        }
                    }
                }
                for (r, accr) in acc.iter().enumerate() {
                    cblock[r * n + j0..r * n + j0 + COLS].copy_from_slice(accr);
                }
                j0 += COLS;
            }
            if j0 < n {
                for r in 0..ROWS {
                    let arow = &a[(i0 + r) * k..(i0 + r + 1) * k];
                    let crow = &mut cblock[r * n + j0..(r + 1) * n];
                    for (p, &aip) in arow.iter().enumerate() {
                        let brow = &b[p * n + j0..(p + 1) * n];
                        for (cj, &bj) in crow.iter_mut().zip(brow) {
                            *cj = *cj + aip * bj;
                        }
                    }
                }
            }
        } else {
            for (r, crow) in cblock.chunks_mut(n).enumerate() {
                let arow = &a[(i0 + r) * k..(i0 + r + 1) * k];
                for (p, &aip) in arow.iter().enumerate() {
                    let brow = &b[p * n..(p + 1) * n];
                    for (cj, &bj) in crow.iter_mut().zip(brow) {
                        *cj = *cj + aip * bj;
                    }
                }
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > ROWS {
        c.par_chunks_mut(ROWS * n).enumerate().for_each(block);
    } else {
        c.chunks_mut(ROWS * n).enumerate().for_each(block);
    }
    c
}

/// Batched product over a leading batch dimension of `batch` independent
/// `m × k` by `k × n` products.
#[allow(clippy::too_many_arguments)]
pub fn batched_matmul<T: Real>(
    a: &[T],
    b: &[T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
) -> Vec<T> {
    let work = |i: usize| {
        matmul(
            &a[i * m * k..(i + 1) * m * k],
            &b[i * k * n..(i + 1) * k * n],
            m,
            k,
            n,
            ta,
            tb,
        )
    };
    let parts: Vec<Vec<T>> = if batch * m * k * n >= PAR_THRESHOLD && batch > 1 {
        (0..batch).into_par_iter().map(work).collect()
    } else {
        (0..batch).map(work).collect()
    };
    parts.concat()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn transposed_operands_agree_with_naive() {
        let a: Vec<f64> = (0..6).map(|x| x as f64 * 0.5 - 1.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|x| (x as f64).sin()).collect(); // 3x4
        let expect = naive(&a, &b, 2, 3, 4);
        assert_eq!(matmul(&a, &b, 2, 3, 4, false, false), expect);
        let at = transpose(&a, 2, 3);
        let bt = transpose(&b, 3, 4);
        assert_eq!(matmul(&at, &b, 2, 3, 4, true, false), expect);
        assert_eq!(matmul(&a, &bt, 2, 3, 4, false, true), expect);
        assert_eq!(matmul(&at, &bt, 2, 3, 4, true, true), expect);
    }

    #[test]
    fn trailing_zero_terms_are_exact() {
        let a = [0.1f64, 0.7, 0.2];
        let b = [1.3f64, -2.2, 0.9];
        let padded_a = [0.1f64, 0.7, 0.2, 0.0, 0.0];
        let padded_b = [1.3f64, -2.2, 0.9, 5.0, -7.0];
        let x = matmul(&a, &b, 1, 3, 1, false, false);
        let y = matmul(&padded_a, &padded_b, 1, 5, 1, false, false);
        assert_eq!(x[0].to_bits(), y[0].to_bits());
    }
}
