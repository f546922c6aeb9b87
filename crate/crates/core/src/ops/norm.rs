use super::params::{BatchNormParams, BnSite, BnUpdate, Mode};
use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

/// What the backward pass needs from one batch-norm application.
#[derive(Clone, Debug)]
pub(crate) struct BnCache {
    /// Channel range of the parameters this application used.
    offset: usize,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    train: bool,
}

/// Normalizes the columns of a row-major `rows x c` block with parameter
/// channels `offset..offset + c`. In train mode the batch statistics are
/// returned for the caller to fold into the running statistics.
pub(crate) fn bn_forward(
    x: &mut [f64],
    c: usize,
    bn: &BatchNormParams,
    offset: usize,
    mode: Mode,
    record: bool,
) -> Result<(Option<BnCache>, Option<(Vec<f64>, Vec<f64>)>)> {
    let rows = if c == 0 { 0 } else { x.len() / c };
    let (mean, var, stats) = match mode {
        Mode::Train => {
            if rows == 0 {
                return Err(Error::Empty("batch norm over an empty batch".into()));
            }
            let mut mean = vec![0.0; c];
            for r in x.chunks_exact(c) {
                for (m, v) in mean.iter_mut().zip(r) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= rows as f64);
            let mut var = vec![0.0; c];
            for r in x.chunks_exact(c) {
                for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            var.iter_mut().for_each(|s| *s /= rows as f64);
            let unbiased = if rows > 1 {
                var.iter().map(|v| v * rows as f64 / (rows - 1) as f64).collect()
            } else {
                var.clone()
            };
            let stats = (mean.clone(), unbiased);
            (mean, var, Some(stats))
        }
        Mode::Eval => {
            let mean = bn.running_mean[offset..offset + c].to_vec();
            let var = bn.running_var[offset..offset + c].to_vec();
            if mean.iter().chain(&var).any(|v| !v.is_finite()) || var.iter().any(|&v| v < 0.0) {
                return Err(Error::Params("non-finite batch norm statistics".into()));
            }
            (mean, var, None)
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + bn.epsilon).sqrt()).collect();
    let scale = &bn.scale[offset..offset + c];
    let shift = &bn.shift[offset..offset + c];
    let mut xhat = if record { Vec::with_capacity(x.len()) } else { Vec::new() };
    for r in x.chunks_exact_mut(c.max(1)) {
        for j in 0..c {
            let h = (r[j] - mean[j]) * inv_std[j];
            if record {
                xhat.push(h);
            }
            r[j] = h * scale[j] + shift[j];
        }
    }
    let cache = record.then(|| BnCache {
        offset,
        xhat,
        inv_std,
        train: mode == Mode::Train,
    });
    Ok((cache, stats))
}

/// Returns the input gradient in place of `g` and accumulates the affine
/// gradients into `dscale`/`dshift` (full-length parameter vectors).
pub(crate) fn bn_backward(
    g: &mut [f64],
    c: usize,
    bn: &BatchNormParams,
    cache: &BnCache,
    dscale: &mut [f64],
    dshift: &mut [f64],
) {
    let rows = if c == 0 { 0 } else { g.len() / c };
    let off = cache.offset;
    let scale = &bn.scale[off..off + c];
    let mut s1 = vec![0.0; c];
    let mut s2 = vec![0.0; c];
    for (gr, hr) in g.chunks_exact(c.max(1)).zip(cache.xhat.chunks_exact(c.max(1))) {
        for j in 0..c {
            dshift[off + j] += gr[j];
            dscale[off + j] += gr[j] * hr[j];
            let dh = gr[j] * scale[j];
            s1[j] += dh;
            s2[j] += dh * hr[j];
        }
    }
    let m = rows as f64;
    for (gr, hr) in g.chunks_exact_mut(c.max(1)).zip(cache.xhat.chunks_exact(c.max(1))) {
        for j in 0..c {
            let dh = gr[j] * scale[j];
            gr[j] = if cache.train {
                cache.inv_std[j] / m * (m * dh - s1[j] - hr[j] * s2[j])
            } else {
                dh * cache.inv_std[j]
            };
        }
    }
}

pub(crate) fn push_update(updates: &mut Vec<BnUpdate>, site: BnSite, stats: Option<(Vec<f64>, Vec<f64>)>) {
    if let Some((mean, var)) = stats {
        updates.push(BnUpdate { site, mean, var });
    }
}

/// Batch normalization of an `n x c` tensor. Training mode normalizes with
/// batch statistics and updates the running statistics of `p`; eval mode
/// uses the running statistics.
pub fn batch_norm(x: &DenseTensor, p: &mut BatchNormParams, training: bool) -> Result<DenseTensor> {
    let (rows, c) = x.expect_matrix("batch norm input")?;
    if c != p.channels() {
        return Err(Error::Shape(format!("batch norm has {} channels, input has {c}", p.channels())));
    }
    p.validate()?;
    let mut data = x.data().to_vec();
    let mode = if training { Mode::Train } else { Mode::Eval };
    let (_, stats) = bn_forward(&mut data, c, p, 0, mode, false)?;
    if let Some((mean, var)) = stats {
        let m = p.momentum;
        for j in 0..c {
            p.running_mean[j] = m * p.running_mean[j] + (1.0 - m) * mean[j];
            p.running_var[j] = m * p.running_var[j] + (1.0 - m) * var[j];
        }
    }
    DenseTensor::matrix(rows, c, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch() -> DenseTensor {
        let data: Vec<f64> = (0..40).map(|i| ((i * 37 % 17) as f64) * 0.3 - 2.0 + (i % 4) as f64).collect();
        DenseTensor::matrix(10, 4, data).unwrap()
    }

    #[test]
    fn training_output_is_standardized() {
        let x = batch();
        let mut p = BatchNormParams::new(4);
        let y = batch_norm(&x, &mut p, true).unwrap();
        for j in 0..4 {
            let col: Vec<f64> = (0..10).map(|i| y.at(i, j)).collect();
            let mean = col.iter().sum::<f64>() / 10.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 10.0;
            assert!(mean.abs() < 1e-5);
            // epsilon keeps the variance slightly under one
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn identity_in_eval_mode() {
        let x = batch();
        let mut p = BatchNormParams::new(4);
        p.epsilon = 1e-300;
        assert_eq!(batch_norm(&x, &mut p, false).unwrap(), x);
    }

    #[test]
    fn matches_two_pass_oracle_and_updates_running_stats() {
        let x = batch();
        let mut p = BatchNormParams::new(4);
        p.scale = vec![1.5, -0.5, 2.0, 1.0];
        p.shift = vec![0.1, 0.2, -0.3, 0.0];
        let y = batch_norm(&x, &mut p, true).unwrap();
        for j in 0..4 {
            let col: Vec<f64> = (0..10).map(|i| x.at(i, j)).collect();
            let mean = col.iter().sum::<f64>() / 10.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 10.0;
            for i in 0..10 {
                let want = (col[i] - mean) / (var + 1e-5).sqrt() * p.scale[j] + p.shift[j];
                assert!((y.at(i, j) - want).abs() <= 1e-6 * want.abs().max(1.0));
            }
            assert!((p.running_mean[j] - 0.1 * mean).abs() < 1e-12);
            assert!((p.running_var[j] - (0.9 + 0.1 * var * 10.0 / 9.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_training_batch_is_an_error() {
        let x = DenseTensor::matrix(0, 4, vec![]).unwrap();
        assert!(batch_norm(&x, &mut BatchNormParams::new(4), true).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let x = batch();
        let mut p = BatchNormParams::new(4);
        p.scale = vec![1.5, -0.5, 2.0, 1.0];
        let up: Vec<f64> = (0..40).map(|i| ((i * 11 % 7) as f64) - 3.0).collect();
        let loss = |x: &[f64]| {
            let mut d = x.to_vec();
            bn_forward(&mut d, 4, &p, 0, Mode::Train, false).unwrap();
            d.iter().zip(&up).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut d = x.data().to_vec();
        let (cache, _) = bn_forward(&mut d, 4, &p, 0, Mode::Train, true).unwrap();
        let mut g = up.clone();
        let (mut ds, mut dh) = (vec![0.0; 4], vec![0.0; 4]);
        bn_backward(&mut g, 4, &p, &cache.unwrap(), &mut ds, &mut dh);
        let h = 1e-5;
        for i in 0..40 {
            let mut xp = x.data().to_vec();
            xp[i] += h;
            let mut xm = x.data().to_vec();
            xm[i] -= h;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6 * (1.0 + fd.abs()), "{i}: {fd} vs {}", g[i]);
        }
    }
}
