//! Matrix multiply kernels.
//!
//! All matrices are dense row-major slices. The kernels accumulate into the
//! output (callers zero it first when they want a plain product), loop over
//! the inner dimension in a fixed order and only parallelise over disjoint
//! row chunks of the output, so results are bit-identical across thread
//! counts and with the `parallel` feature off.

use super::scalar::Scalar;
use crate::par;

/// Row chunk granularity for parallel dispatch. Fixed so the work split does
/// not depend on the machine.
const ROW_CHUNK: usize = 8;
/// Column block so the hot B row segment and C rows stay cache resident.
const COL_BLOCK: usize = 1024;
/// Below this many multiply-adds the parallel dispatch overhead dominates.
const PAR_MIN_WORK: usize = 1 << 18;

/// `c += a * b` with `a` m-by-k, `b` k-by-n, `c` m-by-n.
pub fn gemm_nn<T: Scalar>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m * k * n < PAR_MIN_WORK {
        return gemm_nn_serial(c, a, b, m, k, n);
    }
    par::for_each_chunk_mut(c, ROW_CHUNK * n, |chunk, c_rows| {
        let i0 = chunk * ROW_CHUNK;
        nn_block(c_rows, &a[i0 * k..], b, c_rows.len() / n, k, n);
    });
}

/// Sequential twin of [`gemm_nn`], kept callable for benchmarks.
pub fn gemm_nn_serial<T: Scalar>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    par::for_each_chunk_mut_serial(c, ROW_CHUNK * n, |chunk, c_rows| {
        let i0 = chunk * ROW_CHUNK;
        nn_block(c_rows, &a[i0 * k..], b, c_rows.len() / n, k, n);
    });
}

/// Inner kernel: `c_rows` holds `rows` full output rows, `a` starts at the
/// matching row of A. Loops kk outer so each B row segment is reused across
/// all rows while it is hot.
fn nn_block<T: Scalar>(c_rows: &mut [T], a: &[T], b: &[T], rows: usize, k: usize, n: usize) {
    let mut j0 = 0;
    while j0 < n {
        let jb = COL_BLOCK.min(n - j0);
        for kk in 0..k {
            let b_seg = &b[kk * n + j0..kk * n + j0 + jb];
            for r in 0..rows {
                let aik = a[r * k + kk];
                if aik == T::zero() {
                    continue;
                }
                let c_seg = &mut c_rows[r * n + j0..r * n + j0 + jb];
                for (cv, &bv) in c_seg.iter_mut().zip(b_seg) {
                    *cv += aik * bv;
                }
            }
        }
        j0 += jb;
    }
}

/// `c += a * b^T` with `a` m-by-k, `b` n-by-k (so `b^T` is k-by-n).
///
/// Dot-product form: both operand rows are contiguous. Used for gradients
/// where the inner dimension is the large one.
pub fn gemm_nt<T: Scalar>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    if m * k * n < PAR_MIN_WORK {
        return gemm_nt_serial(c, a, b, m, k, n);
    }
    par::for_each_chunk_mut(c, n, |i, c_row| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, cv) in c_row.iter_mut().enumerate() {
            *cv += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    });
}

/// Sequential twin of [`gemm_nt`].
pub fn gemm_nt_serial<T: Scalar>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    par::for_each_chunk_mut_serial(c, n, |i, c_row| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, cv) in c_row.iter_mut().enumerate() {
            *cv += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    });
}

/// `c += a^T * b` with `a` k-by-m, `b` k-by-n, `c` m-by-n.
///
/// Outer-product accumulation over `kk`; row `kk` of both inputs is
/// contiguous. Sequential: only used for small outputs (dense-layer weight
/// gradients and row-transposed products) where dispatch would dominate.
pub fn gemm_tn<T: Scalar>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for kk in 0..k {
        let arow = &a[kk * m..(kk + 1) * m];
        let brow = &b[kk * n..(kk + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Dot product with eight explicit accumulators.
///
/// The accumulator layout is spelled out rather than left to the
/// autovectoriser so the floating point result does not depend on the target
/// instruction set.
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let mut ac = a.chunks_exact(8);
    let mut bc = b.chunks_exact(8);
    for (xa, xb) in (&mut ac).zip(&mut bc) {
        for l in 0..8 {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut tail = T::zero();
    for (&xa, &xb) in ac.remainder().iter().zip(bc.remainder()) {
        tail += xa * xb;
    }
    let s01 = acc[0] + acc[1];
    let s23 = acc[2] + acc[3];
    let s45 = acc[4] + acc[5];
    let s67 = acc[6] + acc[7];
    ((s01 + s23) + (s45 + s67)) + tail
}
