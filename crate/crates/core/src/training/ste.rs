use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

/// Straight-through gradient of `sign`: the upstream gradient where the
/// latent value lies in `[-1, 1]`, zero elsewhere.
pub fn ste_sign_backward(upstream: &DenseTensor, latent: &DenseTensor) -> Result<DenseTensor> {
    if upstream.shape() != latent.shape() {
        return Err(Error::Shape(format!(
            "upstream {:?} vs latent {:?}",
            upstream.shape(),
            latent.shape()
        )));
    }
    let d = upstream
        .data()
        .iter()
        .zip(latent.data())
        .map(|(&g, &x)| if x.abs() <= 1.0 { g } else { 0.0 })
        .collect();
    DenseTensor::new(upstream.shape().to_vec(), d)
}

/// Centres every output row (channel) of an `o x d` latent weight matrix and
/// clips it to `[-1, 1]`.
pub fn latent_weight_maintenance(weights: &DenseTensor) -> Result<DenseTensor> {
    let (_, d) = weights.expect_matrix("latent weights")?;
    let mut w = weights.clone();
    maintain_in_place(w.data_mut(), d);
    Ok(w)
}

pub(crate) fn maintain_in_place(w: &mut [f64], d: usize) {
    if d == 0 {
        return;
    }
    for row in w.chunks_exact_mut(d) {
        // Offsetting by the first entry keeps constant rows exact.
        let first = row[0];
        let mean = first + row.iter().map(|v| v - first).sum::<f64>() / d as f64;
        for v in row {
            *v = (*v - mean).clamp(-1.0, 1.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_is_closed() {
        let g = DenseTensor::vector(vec![2.0, 2.0, 2.0, 2.0]);
        let x = DenseTensor::vector(vec![0.5, 1.5, 1.0, -1.0]);
        assert_eq!(ste_sign_backward(&g, &x).unwrap().data(), &[2.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn constant_channel_becomes_zero() {
        let w = DenseTensor::matrix(2, 3, vec![0.7, 0.7, 0.7, 0.5, -0.5, 0.0]).unwrap();
        let m = latent_weight_maintenance(&w).unwrap();
        assert_eq!(m.data(), &[0.0, 0.0, 0.0, 0.5, -0.5, 0.0]);
    }
}
