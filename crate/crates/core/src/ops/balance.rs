use super::params::BalanceMode;
use crate::tensor::DenseTensor;

/// Which statistics a balance function centres with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BalanceAxis {
    /// One centre per column, over all rows.
    Channels,
    /// One centre per row, over its columns.
    Rows,
}

/// Records which element supplied each median, for the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct BalanceCache {
    mode: BalanceMode,
    /// Per (segment, channel): the row index of the median element.
    median_rows: Vec<usize>,
}

/// Lower median index into `values`: sorts by `(value, position)` so equal
/// values resolve deterministically.
fn lower_median(values: &[f64]) -> usize {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    let mid = (values.len() - 1) / 2;
    idx.select_nth_unstable_by(mid, |&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    idx[mid]
}

/// Centres each column within every row segment `[s[t], s[t+1])`.
pub(crate) fn balance_segments(x: &mut [f64], c: usize, segments: &[usize], mode: BalanceMode) -> BalanceCache {
    let mut median_rows = Vec::new();
    let mut col = Vec::new();
    for w in segments.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        if hi == lo {
            continue;
        }
        for j in 0..c {
            col.clear();
            col.extend((lo..hi).map(|r| x[r * c + j]));
            let centre = match mode {
                BalanceMode::Mean => col.iter().sum::<f64>() / col.len() as f64,
                BalanceMode::Median => {
                    let m = lower_median(&col);
                    median_rows.push(lo + m);
                    col[m]
                }
            };
            for r in lo..hi {
                x[r * c + j] -= centre;
            }
        }
    }
    BalanceCache { mode, median_rows }
}

pub(crate) fn balance_segments_backward(g: &mut [f64], c: usize, segments: &[usize], cache: &BalanceCache) {
    let mut t = 0;
    for w in segments.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        if hi == lo {
            continue;
        }
        for j in 0..c {
            let total: f64 = (lo..hi).map(|r| g[r * c + j]).sum();
            match cache.mode {
                BalanceMode::Mean => {
                    let mean = total / (hi - lo) as f64;
                    for r in lo..hi {
                        g[r * c + j] -= mean;
                    }
                }
                BalanceMode::Median => {
                    g[cache.median_rows[t] * c + j] -= total;
                    t += 1;
                }
            }
        }
    }
}

/// Subtracts the mean or lower median along `axis`.
pub fn balance(x: &DenseTensor, mode: BalanceMode, axis: BalanceAxis) -> DenseTensor {
    let (rows, cols) = (x.rows(), x.cols());
    match axis {
        BalanceAxis::Channels => {
            let mut data = x.data().to_vec();
            balance_segments(&mut data, cols, &[0, rows], mode);
            DenseTensor::new(x.shape().to_vec(), data).expect("same shape")
        }
        BalanceAxis::Rows => {
            let t = x.transpose();
            let mut data = t.data().to_vec();
            balance_segments(&mut data, rows, &[0, cols], mode);
            let back = DenseTensor::matrix(cols, rows, data).expect("same shape").transpose();
            DenseTensor::new(x.shape().to_vec(), back.into_data()).expect("same shape")
        }
    }
}
