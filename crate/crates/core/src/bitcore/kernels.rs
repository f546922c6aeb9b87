//! XNOR/popcount kernels over packed rows.
//!
//! For `a, b` in {-1,+1}^d packed as bits, `sum_k a_k b_k = d - 2 popcount(a ^ b)`
//! and the Hamming distance is `popcount(a ^ b)`. Padding bits are zero in
//! both operands so they never reach the popcount. All accumulation is
//! integer; rescaling is one final real multiply.

use rayon::prelude::*;

use super::bitmatrix::{BitMatrix, BitRow};
use super::rescale::RescaleTensor;
use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

/// Rows of the left operand processed together so each right-hand word is
/// loaded once per block.
const RB: usize = 4;
const ROWS_PER_TASK: usize = 32;

/// `+1` where `x >= 0`, else `-1`.
pub fn sign_quantize(x: &DenseTensor) -> Result<DenseTensor> {
    x.check_finite()?;
    Ok(x.map(sign))
}

#[inline(always)]
pub fn sign(v: f64) -> f64 {
    if v >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

#[inline(always)]
fn xor_popcount(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

fn check_dims(a: BitRow<'_>, b: BitRow<'_>) -> Result<()> {
    if a.dim != b.dim {
        return Err(Error::Shape(format!("bit rows of dim {} and {}", a.dim, b.dim)));
    }
    Ok(())
}

/// Exact `sum_k a_k b_k` of two packed ±1 rows.
pub fn xnor_dot(a: BitRow<'_>, b: BitRow<'_>) -> Result<i64> {
    check_dims(a, b)?;
    Ok(a.dim as i64 - 2 * xor_popcount(a.words, b.words) as i64)
}

/// Number of positions where two packed rows differ.
pub fn hamming_distance(a: BitRow<'_>, b: BitRow<'_>) -> Result<u32> {
    check_dims(a, b)?;
    Ok(xor_popcount(a.words, b.words))
}

/// Fills `out[r * cols + j] = popcount(a_row(r) ^ b_row(j))` for a block of
/// `a` rows against every `b` row.
#[inline(always)]
fn xor_popcount_block_generic(a: &[u64], b: &[u64], wpr: usize, out: &mut [u32]) {
    let rows = a.len() / wpr;
    let cols = b.len() / wpr;
    let mut i = 0;
    while i + RB <= rows {
        let ab = &a[i * wpr..(i + RB) * wpr];
        for j in 0..cols {
            let bw = &b[j * wpr..(j + 1) * wpr];
            let mut acc = [0u32; RB];
            for (w, &y) in bw.iter().enumerate() {
                for r in 0..RB {
                    acc[r] += (ab[r * wpr + w] ^ y).count_ones();
                }
            }
            for r in 0..RB {
                out[(i + r) * cols + j] = acc[r];
            }
        }
        i += RB;
    }
    for ii in i..rows {
        let aw = &a[ii * wpr..(ii + 1) * wpr];
        for j in 0..cols {
            out[ii * cols + j] = xor_popcount(aw, &b[j * wpr..(j + 1) * wpr]);
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "popcnt,avx2")]
unsafe fn xor_popcount_block_x86(a: &[u64], b: &[u64], wpr: usize, out: &mut [u32]) {
    xor_popcount_block_generic(a, b, wpr, out)
}

fn xor_popcount_block(a: &[u64], b: &[u64], wpr: usize, out: &mut [u32]) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("popcnt") && std::is_x86_feature_detected!("avx2") {
            // SAFETY: features detected at runtime.
            unsafe { xor_popcount_block_x86(a, b, wpr, out) };
            return;
        }
    }
    xor_popcount_block_generic(a, b, wpr, out)
}

/// `popcount(a_i ^ b_j)` for every row pair, `a.rows() x b.rows()`.
pub fn xor_popcount_matrix(a: &BitMatrix, b: &BitMatrix) -> Result<Vec<u32>> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "inner dimensions differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let (m, n, wpr) = (a.rows(), b.rows(), a.words_per_row());
    let mut out = vec![0u32; m * n];
    if m == 0 || n == 0 {
        return Ok(out);
    }
    if wpr == 0 {
        return Ok(out);
    }
    out.par_chunks_mut(ROWS_PER_TASK * n)
        .zip(a.words().par_chunks(ROWS_PER_TASK * wpr))
        .for_each(|(o, ab)| xor_popcount_block(ab, b.words(), wpr, o));
    Ok(out)
}

/// Integer ±1 products: `out[i][j] = sum_k a_ik b_jk` where `b` holds the
/// columns of the right operand as rows (i.e. `A * B^T`).
pub fn xnor_gemm_int(a: &BitMatrix, b: &BitMatrix) -> Result<Vec<i32>> {
    let d = a.dim() as i32;
    Ok(xor_popcount_matrix(a, b)?
        .into_iter()
        .map(|p| d - 2 * p as i32)
        .collect())
}

/// `(sign(A) ⊛ sign(B)) ⊙ Γ` on packed operands. `b` stores the right
/// operand's columns as rows, so the output is `a.rows() x b.rows()`.
pub fn binary_gemm(a: &BitMatrix, b: &BitMatrix, gamma: &RescaleTensor) -> Result<DenseTensor> {
    let (m, n) = (a.rows(), b.rows());
    gamma.check_output(m, n)?;
    let d = a.dim() as i64;
    let pops = xor_popcount_matrix(a, b)?;
    let mut out = vec![0.0; m * n];
    out.par_chunks_mut(n.max(1))
        .zip(pops.par_chunks(n.max(1)))
        .enumerate()
        .for_each(|(r, (o, p))| {
            for c in 0..o.len() {
                o[c] = (d - 2 * p[c] as i64) as f64 * gamma.value(r, c);
            }
        });
    DenseTensor::matrix(m, n, out)
}

/// All-pairs Hamming distances between the rows of `x`; symmetric with a
/// zero diagonal, row-major `n x n`.
pub fn pairwise_hamming(x: &BitMatrix) -> Vec<u32> {
    xor_popcount_matrix(x, x).expect("same operand")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn packed(rows: &[&[f64]]) -> BitMatrix {
        BitMatrix::pack(&DenseTensor::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn sign_of_zero_is_positive() {
        let q = sign_quantize(&DenseTensor::vector(vec![0.0, -0.5, 3.2, -0.0])).unwrap();
        assert_eq!(q.data(), &[1.0, -1.0, 1.0, 1.0]);
        assert_eq!(sign_quantize(&q).unwrap(), q);
        assert!(sign_quantize(&DenseTensor::vector(vec![f64::NAN])).is_err());
    }

    #[test]
    fn small_dot_and_hamming() {
        let m = packed(&[&[1.0, -1.0, 1.0], &[1.0, 1.0, -1.0]]);
        assert_eq!(xnor_dot(m.row(0), m.row(1)).unwrap(), -1);
        assert_eq!(xnor_dot(m.row(0), m.row(0)).unwrap(), 3);
        assert_eq!(hamming_distance(m.row(0), m.row(1)).unwrap(), 2);
        assert_eq!(hamming_distance(m.row(1), m.row(1)).unwrap(), 0);
        let other = packed(&[&[1.0, 1.0]]);
        assert!(xnor_dot(m.row(0), other.row(0)).is_err());
        assert!(hamming_distance(m.row(0), other.row(0)).is_err());
    }

    #[test]
    fn pairwise_two_by_two() {
        let m = packed(&[&[1.0, 1.0], &[1.0, -1.0]]);
        assert_eq!(pairwise_hamming(&m), vec![0, 1, 1, 0]);
    }

    #[test]
    fn gemm_scalar_rescale() {
        let a = packed(&[&[1.0, -1.0, 1.0, 1.0]]);
        let b = packed(&[&[1.0, 1.0, 1.0, -1.0]]);
        let out = binary_gemm(&a, &b, &RescaleTensor::ChannelWise(vec![2.0])).unwrap();
        assert_eq!(out.data(), &[2.0 * xnor_dot(a.row(0), b.row(0)).unwrap() as f64]);
        assert!(binary_gemm(&a, &b, &RescaleTensor::ones(2)).is_err());
    }

    #[test]
    fn empty_dimension() {
        let a = BitMatrix::new(3, 0);
        assert_eq!(pairwise_hamming(&a), vec![0; 9]);
    }
}
