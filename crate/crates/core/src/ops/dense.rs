use super::activation::{activation_backward, activation_forward, quantize, quantize_backward};
use super::norm::{bn_backward, bn_forward, push_update, BnCache};
use super::params::{BnSite, LayerGrads, LayerParams, Mode, Quantizer};
use super::LayerOutput;
use crate::bitcore::{xnor_gemm_int, BitMatrix};
use crate::error::{Error, Result};
use crate::linalg;
use crate::profile::{self, Category};
use crate::tensor::DenseTensor;

/// `rows x o` product `h * W^T` with `W` stored `o x d`. When both operands
/// are exactly ±1 the product runs on packed bits; integer dot products are
/// exact in `f64`, so the result is the same either way.
pub(crate) fn linear(h: &[f64], w: &[f64], rows: usize, d: usize, o: usize) -> Vec<f64> {
    profile::time(Category::Gemm, || {
        let pm1 = |v: &[f64]| v.iter().all(|&x| x == 1.0 || x == -1.0);
        if d > 0 && pm1(w) && pm1(h) {
            let hb = BitMatrix::pack_signs(h, rows, d);
            let wb = BitMatrix::pack_signs(w, o, d);
            if let Ok(ints) = xnor_gemm_int(&hb, &wb) {
                return ints.into_iter().map(f64::from).collect();
            }
        }
        linalg::gemm_nt(h, w, rows, d, o)
    })
}

/// Input and weight gradients of [`linear`]. Upstream gradients behind a
/// max aggregation are mostly zero; those skip the dense products.
pub(crate) fn linear_backward(dz: &[f64], h: &[f64], w: &[f64], rows: usize, d: usize, o: usize) -> (Vec<f64>, Vec<f64>) {
    let nnz = dz.iter().filter(|&&g| g != 0.0).count();
    if nnz * 4 > dz.len() {
        let dh = linalg::gemm(dz, w, rows, o, d);
        let dw = linalg::gemm_tn(dz, h, o, rows, d);
        return (dh, dw);
    }
    let mut dh = vec![0.0; rows * d];
    let mut dw = vec![0.0; o * d];
    for (r, gr) in dz.chunks_exact(o.max(1)).enumerate() {
        let hr = &h[r * d..(r + 1) * d];
        let dhr = &mut dh[r * d..(r + 1) * d];
        for (c, &g) in gr.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let wc = &w[c * d..(c + 1) * d];
            for t in 0..d {
                dhr[t] += g * wc[t];
            }
            for (a, &x) in dw[c * d..(c + 1) * d].iter_mut().zip(hr) {
                *a += g * x;
            }
        }
    }
    (dh, dw)
}

/// Multiplies the effective-weight gradient by the weight quantizer's
/// derivative at the latent weights.
pub(crate) fn latent_weight_grad(p: &LayerParams, mut dw: Vec<f64>) -> Vec<f64> {
    quantize_backward(&mut dw, p.latent_weights.data(), p.quant.weights);
    dw
}

#[derive(Clone, Debug)]
pub(crate) struct DenseCache {
    bn_in: Option<BnCache>,
    pre_q: Option<Vec<f64>>,
    h: Vec<f64>,
    w_eff: Vec<f64>,
    pre_gamma: Option<Vec<f64>>,
    bn_out: Option<BnCache>,
    pre_act: Vec<f64>,
    pre_q_out: Option<Vec<f64>>,
    rows: usize,
}

/// Fully connected block:
/// `[BN] -> [quantize] -> h W^T + b -> [⊙ Γ] -> [BN] -> activation -> [quantize]`.
/// The float MLP block uses the output BN; binary blocks normalize their
/// input and rescale instead.
pub(crate) fn dense_forward(x: &DenseTensor, p: &LayerParams, mode: Mode, record: bool) -> Result<LayerOutput<DenseCache>> {
    let (rows, d) = x.expect_matrix("dense input")?;
    let o = p.out_dim();
    if d != p.in_dim() {
        return Err(Error::Shape(format!("dense layer expects {} inputs, got {d}", p.in_dim())));
    }
    let mut updates = Vec::new();
    let mut h = x.data().to_vec();
    let mut bn_in = None;
    if let Some(bn) = &p.bn_in {
        let (c, s) = bn_forward(&mut h, d, bn, 0, mode, record)?;
        bn_in = c;
        push_update(&mut updates, BnSite::In, s);
    }
    let mut pre_q = None;
    if p.flags.binary_inputs {
        if record {
            pre_q = Some(h.clone());
        }
        quantize(&mut h, p.quant.activations);
    }
    let w_eff = p.effective_weights();
    let mut z = linear(&h, &w_eff, rows, d, o);
    if let Some(b) = &p.bias {
        for r in z.chunks_exact_mut(o.max(1)) {
            for (v, bv) in r.iter_mut().zip(b) {
                *v += bv;
            }
        }
    }
    let mut pre_gamma = None;
    if let Some(g) = &p.gamma {
        g.check_output(rows, o)?;
        if record {
            pre_gamma = Some(z.clone());
        }
        g.apply(&mut z, o);
    }
    let mut bn_out = None;
    if let Some(bn) = &p.bn_out {
        let (c, s) = bn_forward(&mut z, o, bn, 0, mode, record)?;
        bn_out = c;
        push_update(&mut updates, BnSite::Out, s);
    }
    let pre_act = if record { z.clone() } else { Vec::new() };
    activation_forward(&mut z, p.flags.activation, p.prelu_slope);
    let mut pre_q_out = None;
    if p.flags.binary_outputs {
        if record {
            pre_q_out = Some(z.clone());
        }
        quantize(&mut z, p.quant.activations);
    }
    let cache = record.then(|| DenseCache {
        bn_in,
        pre_q,
        h,
        w_eff,
        pre_gamma,
        bn_out,
        pre_act,
        pre_q_out,
        rows,
    });
    Ok(LayerOutput {
        y: DenseTensor::matrix(rows, o, z)?,
        cache,
        updates,
    })
}

pub(crate) fn dense_backward(p: &LayerParams, cache: &DenseCache, g: &DenseTensor) -> (DenseTensor, LayerGrads) {
    let (rows, d, o) = (cache.rows, p.in_dim(), p.out_dim());
    let mut grads = p.zero_grads();
    let mut dz = g.data().to_vec();
    if let Some(pre) = &cache.pre_q_out {
        quantize_backward(&mut dz, pre, p.quant.activations);
    }
    grads.prelu_slope = activation_backward(&mut dz, &cache.pre_act, p.flags.activation, p.prelu_slope);
    if let (Some(bn), Some(c)) = (&p.bn_out, &cache.bn_out) {
        let (ds, dh) = grads.bn_out.as_mut().expect("bn grads");
        bn_backward(&mut dz, o, bn, c, ds, dh);
    }
    if let (Some(gm), Some(pre)) = (&p.gamma, &cache.pre_gamma) {
        let (dg, dpre) = gm.backward(pre, &dz, o);
        grads.gamma = Some(dg);
        dz = dpre;
    }
    if let Some(db) = &mut grads.bias {
        for r in dz.chunks_exact(o.max(1)) {
            for (a, b) in db.iter_mut().zip(r) {
                *a += b;
            }
        }
    }
    let (mut dh, dw) = linear_backward(&dz, &cache.h, &cache.w_eff, rows, d, o);
    grads.weights = latent_weight_grad(p, dw);
    if let Some(pre) = &cache.pre_q {
        quantize_backward(&mut dh, pre, p.quant.activations);
    }
    if let (Some(bn), Some(c)) = (&p.bn_in, &cache.bn_in) {
        let (ds, dshift) = grads.bn_in.as_mut().expect("bn grads");
        bn_backward(&mut dh, d, bn, c, ds, dshift);
    }
    (DenseTensor::matrix(rows, d, dh).expect("input shape"), grads)
}

/// Eval-mode fully connected block.
pub fn dense(x: &DenseTensor, p: &LayerParams) -> Result<DenseTensor> {
    p.validate()?;
    Ok(dense_forward(x, p, Mode::Eval, false)?.y)
}

/// Eval-mode binary dense block with XNOR/popcount products; `sign` at every
/// quantization site.
pub(crate) fn dense_forward_packed(x: &DenseTensor, p: &LayerParams) -> Result<DenseTensor> {
    let (rows, d) = x.expect_matrix("dense input")?;
    let o = p.out_dim();
    if d != p.in_dim() {
        return Err(Error::Shape(format!("dense layer expects {} inputs, got {d}", p.in_dim())));
    }
    let mut h = x.data().to_vec();
    if let Some(bn) = &p.bn_in {
        bn_forward(&mut h, d, bn, 0, Mode::Eval, false)?;
    }
    let hb = profile::time(Category::Gather, || BitMatrix::pack_signs(&h, rows, d));
    let wb = BitMatrix::pack_signs(p.latent_weights.data(), o, d);
    let ints = profile::time(Category::Gemm, || xnor_gemm_int(&hb, &wb))?;
    let mut z: Vec<f64> = ints.into_iter().map(f64::from).collect();
    if let Some(b) = &p.bias {
        for r in z.chunks_exact_mut(o.max(1)) {
            for (v, bv) in r.iter_mut().zip(b) {
                *v += bv;
            }
        }
    }
    if let Some(g) = &p.gamma {
        g.check_output(rows, o)?;
        g.apply(&mut z, o);
    }
    if let Some(bn) = &p.bn_out {
        bn_forward(&mut z, o, bn, 0, Mode::Eval, false)?;
    }
    activation_forward(&mut z, p.flags.activation, p.prelu_slope);
    if p.flags.binary_outputs {
        quantize(&mut z, Quantizer::Sign);
    }
    DenseTensor::matrix(rows, o, z)
}
