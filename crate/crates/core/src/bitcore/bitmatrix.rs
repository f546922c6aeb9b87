use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

/// An `rows x dim` matrix over {-1, +1}, packed one bit per element.
///
/// Bit `b` of word `w` in a row holds element `64 * w + b` (LSB first); a set
/// bit means +1 and a clear bit -1. Padding bits past `dim` in the last word
/// of each row are always zero.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitMatrix {
    rows: usize,
    dim: usize,
    words_per_row: usize,
    data: Vec<u64>,
}

/// One packed row.
#[derive(Clone, Copy, Debug)]
pub struct BitRow<'a> {
    pub(crate) words: &'a [u64],
    pub(crate) dim: usize,
}

impl<'a> BitRow<'a> {
    pub fn words(&self) -> &'a [u64] {
        self.words
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

#[inline]
pub const fn words_for(dim: usize) -> usize {
    dim.div_ceil(64)
}

#[inline]
fn tail_mask(dim: usize) -> u64 {
    match dim % 64 {
        0 => u64::MAX,
        r => (1u64 << r) - 1,
    }
}

impl BitMatrix {
    /// All elements -1.
    pub fn new(rows: usize, dim: usize) -> Self {
        let words_per_row = words_for(dim);
        Self {
            rows,
            dim,
            words_per_row,
            data: vec![0; rows * words_per_row],
        }
    }

    /// Wraps raw words, rejecting any set padding bit.
    pub fn from_words(rows: usize, dim: usize, data: Vec<u64>) -> Result<Self> {
        let words_per_row = words_for(dim);
        if data.len() != rows * words_per_row {
            return Err(Error::Shape(format!(
                "{rows}x{dim} bit matrix needs {} words, got {}",
                rows * words_per_row,
                data.len()
            )));
        }
        let m = Self {
            rows,
            dim,
            words_per_row,
            data,
        };
        if words_per_row > 0 {
            let mask = !tail_mask(dim);
            for i in 0..rows {
                if m.row_words(i)[words_per_row - 1] & mask != 0 {
                    return Err(Error::Format(format!("row {i} has set padding bits")));
                }
            }
        }
        Ok(m)
    }

    /// Packs a tensor whose elements are exactly -1 or +1. A 1-D tensor is
    /// packed as a single row.
    pub fn pack(x: &DenseTensor) -> Result<Self> {
        x.check_binary()?;
        Ok(Self::pack_signs(x.data(), x.rows(), x.cols()))
    }

    /// Packs `sign(v)` of arbitrary reals (`v >= 0` maps to +1), i.e. quantize
    /// and pack in one pass.
    pub fn pack_signs(values: &[f64], rows: usize, dim: usize) -> Self {
        assert_eq!(values.len(), rows * dim, "pack_signs: size");
        let mut m = Self::new(rows, dim);
        let wpr = m.words_per_row;
        for (i, row) in values.chunks_exact(dim.max(1)).take(rows).enumerate() {
            let words = &mut m.data[i * wpr..(i + 1) * wpr];
            for (w, chunk) in row.chunks(64).enumerate() {
                let mut word = 0u64;
                for (b, &v) in chunk.iter().enumerate() {
                    word |= ((v >= 0.0) as u64) << b;
                }
                words[w] = word;
            }
        }
        m
    }

    pub fn unpack(&self) -> DenseTensor {
        let mut data = Vec::with_capacity(self.rows * self.dim);
        for i in 0..self.rows {
            let words = self.row_words(i);
            for j in 0..self.dim {
                let bit = (words[j / 64] >> (j % 64)) & 1;
                data.push(if bit == 1 { 1.0 } else { -1.0 });
            }
        }
        DenseTensor::matrix(self.rows, self.dim, data).expect("consistent shape")
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn words_per_row(&self) -> usize {
        self.words_per_row
    }

    pub fn words(&self) -> &[u64] {
        &self.data
    }

    pub fn into_words(self) -> Vec<u64> {
        self.data
    }

    #[inline]
    pub fn row_words(&self, i: usize) -> &[u64] {
        &self.data[i * self.words_per_row..(i + 1) * self.words_per_row]
    }

    #[inline]
    pub fn row(&self, i: usize) -> BitRow<'_> {
        BitRow {
            words: self.row_words(i),
            dim: self.dim,
        }
    }

    /// +1 or -1.
    pub fn get(&self, i: usize, j: usize) -> i8 {
        let w = self.data[i * self.words_per_row + j / 64];
        if (w >> (j % 64)) & 1 == 1 {
            1
        } else {
            -1
        }
    }

    pub fn set(&mut self, i: usize, j: usize, positive: bool) {
        assert!(j < self.dim, "column {j} out of range");
        let w = &mut self.data[i * self.words_per_row + j / 64];
        let bit = 1u64 << (j % 64);
        if positive {
            *w |= bit;
        } else {
            *w &= !bit;
        }
    }

    /// Concatenates along columns. Parts must have equal row counts.
    pub fn concat_cols(parts: &[&BitMatrix]) -> Result<Self> {
        let rows = parts.first().map_or(0, |p| p.rows);
        if parts.iter().any(|p| p.rows != rows) {
            return Err(Error::Shape("bit concat: row counts differ".into()));
        }
        let dim = parts.iter().map(|p| p.dim).sum();
        let mut out = Self::new(rows, dim);
        for i in 0..rows {
            let dst = &mut out.data[i * out.words_per_row..(i + 1) * out.words_per_row];
            let mut offset = 0;
            for p in parts {
                append_bits(dst, offset, p.row_words(i), p.dim);
                offset += p.dim;
            }
        }
        Ok(out)
    }

    /// Copies the selected rows, in order.
    pub fn gather_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.words_per_row);
        for &i in idx {
            data.extend_from_slice(self.row_words(i));
        }
        Self {
            rows: idx.len(),
            dim: self.dim,
            words_per_row: self.words_per_row,
            data,
        }
    }

    /// Row range `[start, end)` as an owned matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        Self {
            rows: end - start,
            dim: self.dim,
            words_per_row: self.words_per_row,
            data: self.data[start * self.words_per_row..end * self.words_per_row].to_vec(),
        }
    }
}

/// Writes `len` bits of `src` into `dst` starting at bit `offset`. `dst` bits
/// in that range must be zero.
fn append_bits(dst: &mut [u64], offset: usize, src: &[u64], len: usize) {
    if len == 0 {
        return;
    }
    let shift = offset % 64;
    let base = offset / 64;
    for (w, &word) in src.iter().enumerate() {
        let bits_here = (len - w * 64).min(64);
        let word = if bits_here == 64 {
            word
        } else {
            word & ((1u64 << bits_here) - 1)
        };
        dst[base + w] |= word << shift;
        if shift != 0 && shift + bits_here > 64 {
            dst[base + w + 1] |= word >> (64 - shift);
        }
    }
}
