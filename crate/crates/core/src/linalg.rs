//! The float GEMM used by every real-valued layer, and the float reference
//! the binary kernels are benchmarked against.
//!
//! Register-blocked outer-product kernel (4 rows x `NR` columns) with
//! runtime dispatch to an AVX2 build of the same code. Every output element
//! is accumulated over the inner dimension in ascending order, so results
//! are identical to a naive triple loop and independent of thread count.

use std::ops::{Add, Mul};

use rayon::prelude::*;

pub trait Real:
    Copy + Send + Sync + Default + PartialOrd + Add<Output = Self> + Mul<Output = Self> + 'static
{
    const ZERO: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    #[doc(hidden)]
    fn gemm_rows(a: &[Self], b: &[Self], c: &mut [Self], k: usize, n: usize);
}

const MR: usize = 4;
/// Column panel width kept hot in cache while sweeping rows.
const NC: usize = 256;
/// Rows handed to one rayon task.
const ROWS_PER_TASK: usize = 64;

macro_rules! impl_real {
    ($t:ty, $nr:expr) => {
        impl Real for $t {
            const ZERO: Self = 0.0;
            #[inline(always)]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline(always)]
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn gemm_rows(a: &[Self], b: &[Self], c: &mut [Self], k: usize, n: usize) {
                #[cfg(target_arch = "x86_64")]
                {
                    if std::is_x86_feature_detected!("avx2") {
                        // SAFETY: the feature was detected at runtime.
                        unsafe { gemm_rows_avx2::<$t, $nr>(a, b, c, k, n) };
                        return;
                    }
                }
                gemm_rows_generic::<$t, $nr>(a, b, c, k, n)
            }
        }
    };
}

impl_real!(f32, 16);
impl_real!(f64, 8);

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn gemm_rows_avx2<T: Real, const NR: usize>(
    a: &[T],
    b: &[T],
    c: &mut [T],
    k: usize,
    n: usize,
) {
    gemm_rows_generic::<T, NR>(a, b, c, k, n)
}

/// `c` (rows x n) = `a` (rows x k) * `b` (k x n).
#[inline(always)]
fn gemm_rows_generic<T: Real, const NR: usize>(
    a: &[T],
    b: &[T],
    c: &mut [T],
    k: usize,
    n: usize,
) {
    let rows = a.len() / k;
    let mut j0 = 0;
    while j0 < n {
        let j1 = (j0 + NC).min(n);
        let mut i = 0;
        while i + MR <= rows {
            let mut j = j0;
            while j + NR <= j1 {
                let mut acc = [[T::ZERO; NR]; MR];
                for p in 0..k {
                    let brow: &[T; NR] = b[p * n + j..p * n + j + NR].try_into().unwrap();
                    for (r, accr) in acc.iter_mut().enumerate() {
                        let av = a[(i + r) * k + p];
                        for q in 0..NR {
                            accr[q] = accr[q] + av * brow[q];
                        }
                    }
                }
                for (r, accr) in acc.iter().enumerate() {
                    c[(i + r) * n + j..(i + r) * n + j + NR].copy_from_slice(accr);
                }
                j += NR;
            }
            for jj in j..j1 {
                for r in 0..MR {
                    let mut s = T::ZERO;
                    for p in 0..k {
                        s = s + a[(i + r) * k + p] * b[p * n + jj];
                    }
                    c[(i + r) * n + jj] = s;
                }
            }
            i += MR;
        }
        for ii in i..rows {
            let mut j = j0;
            while j + NR <= j1 {
                let mut acc = [T::ZERO; NR];
                for p in 0..k {
                    let av = a[ii * k + p];
                    let brow = &b[p * n + j..p * n + j + NR];
                    for q in 0..NR {
                        acc[q] = acc[q] + av * brow[q];
                    }
                }
                c[ii * n + j..ii * n + j + NR].copy_from_slice(&acc);
                j += NR;
            }
            for jj in j..j1 {
                let mut s = T::ZERO;
                for p in 0..k {
                    s = s + a[ii * k + p] * b[p * n + jj];
                }
                c[ii * n + jj] = s;
            }
        }
        j0 = j1;
    }
}

/// `C = A * B` with `A` m x k and `B` k x n, all row-major.
pub fn gemm<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::ZERO; m * n];
    gemm_into(a, b, &mut c, m, k, n);
    c
}

pub fn gemm_into<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    assert_eq!(a.len(), m * k, "gemm: lhs size");
    assert_eq!(b.len(), k * n, "gemm: rhs size");
    assert_eq!(c.len(), m * n, "gemm: output size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.fill(T::ZERO);
        return;
    }
    c.par_chunks_mut(ROWS_PER_TASK * n)
        .zip(a.par_chunks(ROWS_PER_TASK * k))
        .for_each(|(cb, ab)| T::gemm_rows(ab, b, cb, k, n));
}

/// `C = A * B^T` with `A` m x k and `B` n x k.
pub fn gemm_nt<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let bt = transpose(b, n, k);
    gemm(a, &bt, m, k, n)
}

/// `C = A^T * B` with `A` k x m and `B` k x n.
pub fn gemm_tn<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let at = transpose(a, k, m);
    gemm(&at, b, m, k, n)
}

pub fn transpose<T: Copy + Default>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    assert_eq!(a.len(), rows * cols, "transpose: size");
    let mut out = vec![T::default(); rows * cols];
    const B: usize = 32;
    for i0 in (0..rows).step_by(B) {
        for j0 in (0..cols).step_by(B) {
            for i in i0..(i0 + B).min(rows) {
                for j in j0..(j0 + B).min(cols) {
                    out[j * rows + i] = a[i * cols + j];
                }
            }
        }
    }
    out
}

/// Squared euclidean distances between all rows of `x` (n x d), computed
/// through the Gram matrix: `|a|^2 + |b|^2 - 2 a.b`. Float reference for the
/// pairwise Hamming kernel.
pub fn pairwise_sq_l2<T: Real + std::ops::Sub<Output = T>>(x: &[T], n: usize, d: usize) -> Vec<T> {
    let gram = gemm_nt(x, x, n, d, n);
    let norms: Vec<T> = (0..n).map(|i| gram[i * n + i]).collect();
    let two = T::from_f64(2.0);
    let mut out = gram;
    out.par_chunks_mut(n.max(1)).enumerate().for_each(|(i, row)| {
        for (j, v) in row.iter_mut().enumerate() {
            let s = norms[i] + norms[j] - two * *v;
            *v = if s < T::ZERO { T::ZERO } else { s };
        }
    });
    out
}
