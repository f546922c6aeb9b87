use rand::Rng;

use super::params::{Activation, Quantizer};
use crate::tensor::DenseTensor;

/// `x` where `x >= 0`, else `slope * x`.
pub fn prelu(x: &DenseTensor, slope: f64) -> DenseTensor {
    x.map(|v| prelu_scalar(v, slope))
}

#[inline(always)]
fn prelu_scalar(v: f64, slope: f64) -> f64 {
    if v >= 0.0 {
        v
    } else {
        slope * v
    }
}

pub(crate) fn activation_forward(x: &mut [f64], act: Activation, slope: f64) {
    match act {
        Activation::PRelu => x.iter_mut().for_each(|v| *v = prelu_scalar(*v, slope)),
        Activation::Relu => x.iter_mut().for_each(|v| *v = v.max(0.0)),
        Activation::None => {}
    }
}

/// In-place input gradient; returns the slope gradient.
pub(crate) fn activation_backward(g: &mut [f64], pre: &[f64], act: Activation, slope: f64) -> f64 {
    let mut dslope = 0.0;
    match act {
        Activation::PRelu => {
            for (g, &x) in g.iter_mut().zip(pre) {
                if x < 0.0 {
                    dslope += *g * x;
                    *g *= slope;
                }
            }
        }
        Activation::Relu => {
            for (g, &x) in g.iter_mut().zip(pre) {
                if x <= 0.0 {
                    *g = 0.0;
                }
            }
        }
        Activation::None => {}
    }
    dslope
}

pub(crate) fn quantize(x: &mut [f64], q: Quantizer) {
    if q != Quantizer::Identity {
        x.iter_mut().for_each(|v| *v = q.forward(*v));
    }
}

pub(crate) fn quantize_backward(g: &mut [f64], pre: &[f64], q: Quantizer) {
    if q != Quantizer::Identity {
        for (g, &x) in g.iter_mut().zip(pre) {
            *g *= q.derivative(x);
        }
    }
}

/// Row-wise ℓ2 normalization; zero rows stay zero. Returns the row norms.
pub(crate) fn l2_normalize_rows(x: &mut [f64], c: usize) -> Vec<f64> {
    x.chunks_exact_mut(c.max(1))
        .map(|r| {
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                r.iter_mut().for_each(|v| *v /= norm);
            }
            norm
        })
        .collect()
}

/// Backward of [`l2_normalize_rows`] given its output `y` and the norms.
pub(crate) fn l2_normalize_backward(g: &mut [f64], y: &[f64], norms: &[f64], c: usize) {
    for ((gr, yr), &n) in g.chunks_exact_mut(c.max(1)).zip(y.chunks_exact(c.max(1))).zip(norms) {
        if n > 0.0 {
            let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
            for (gv, yv) in gr.iter_mut().zip(yr) {
                *gv = (*gv - yv * dot) / n;
            }
        }
    }
}

/// Inverted dropout: keeps each entry with probability `1 - p` and scales
/// kept entries by `1 / (1 - p)`. Returns the mask multipliers.
pub(crate) fn dropout<R: Rng>(x: &mut [f64], p: f64, rng: &mut R) -> Vec<f64> {
    let keep = 1.0 - p;
    let mask: Vec<f64> = (0..x.len())
        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    for (v, m) in x.iter_mut().zip(&mask) {
        *v *= m;
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prelu_special_slopes() {
        let x = DenseTensor::vector(vec![-2.0, -0.5, 0.0, 1.5]);
        assert_eq!(prelu(&x, 0.0).data(), &[0.0, 0.0, 0.0, 1.5]);
        assert_eq!(prelu(&x, 1.0), x);
        assert_eq!(prelu(&x, 0.25).data(), &[-0.5, -0.125, 0.0, 1.5]);
    }

    #[test]
    fn normalize_rows_unit_or_zero() {
        let mut x = vec![3.0, 4.0, 0.0, 0.0];
        let n = l2_normalize_rows(&mut x, 2);
        assert_eq!(x, vec![0.6, 0.8, 0.0, 0.0]);
        assert_eq!(n, vec![5.0, 0.0]);
    }

    #[test]
    fn normalize_backward_finite_differences() {
        let x = vec![0.3, -1.2, 2.0, 0.5, 0.1, -0.7];
        let up = vec![1.0, -0.5, 0.25, 2.0, -1.0, 0.5];
        let loss = |x: &[f64]| {
            let mut y = x.to_vec();
            l2_normalize_rows(&mut y, 3);
            y.iter().zip(&up).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut y = x.clone();
        let norms = l2_normalize_rows(&mut y, 3);
        let mut g = up.clone();
        l2_normalize_backward(&mut g, &y, &norms, 3);
        for i in 0..x.len() {
            let (mut a, mut b) = (x.clone(), x.clone());
            a[i] += 1e-6;
            b[i] -= 1e-6;
            let fd = (loss(&a) - loss(&b)) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-7);
        }
    }
}
