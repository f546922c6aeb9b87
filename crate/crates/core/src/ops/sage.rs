use super::activation::{
    activation_backward, activation_forward, l2_normalize_backward, l2_normalize_rows, quantize, quantize_backward,
};
use super::dense::{latent_weight_grad, linear, linear_backward};
use super::norm::{bn_backward, bn_forward, push_update, BnCache};
use super::params::{BnSite, LayerGrads, LayerParams, Mode};
use super::LayerOutput;
use crate::bitcore::{binary_gemm, BitMatrix, RescaleTensor};
use crate::error::{Error, Result};
use crate::graph::GraphTopology;
use crate::tensor::DenseTensor;

/// Variable-degree neighbourhoods in compressed row form.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Adjacency {
    offsets: Vec<usize>,
    indices: Vec<usize>,
}

impl Adjacency {
    pub fn new(lists: &[Vec<usize>]) -> Result<Self> {
        let n = lists.len();
        let mut offsets = vec![0];
        let mut indices = Vec::new();
        for (i, l) in lists.iter().enumerate() {
            if let Some(&j) = l.iter().find(|&&j| j >= n) {
                return Err(Error::Graph(format!("node {i} lists out-of-range neighbour {j}")));
            }
            indices.extend_from_slice(l);
            offsets.push(indices.len());
        }
        Ok(Self { offsets, indices })
    }

    pub fn n(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn neighbours(&self, i: usize) -> &[usize] {
        &self.indices[self.offsets[i]..self.offsets[i + 1]]
    }
}

impl From<&GraphTopology> for Adjacency {
    fn from(t: &GraphTopology) -> Self {
        Self {
            offsets: (0..=t.n()).map(|i| i * t.k()).collect(),
            indices: t.edges().to_vec(),
        }
    }
}

/// `[x_i ‖ mean_{j ∈ N(i)} x_j]`; an empty neighbourhood aggregates to zero.
fn concat_mean(x: &[f64], adj: &Adjacency, d: usize) -> Vec<f64> {
    let n = adj.n();
    let mut h = vec![0.0; n * 2 * d];
    for i in 0..n {
        let row = &mut h[i * 2 * d..(i + 1) * 2 * d];
        row[..d].copy_from_slice(&x[i * d..(i + 1) * d]);
        let nb = adj.neighbours(i);
        if nb.is_empty() {
            continue;
        }
        for &j in nb {
            for t in 0..d {
                row[d + t] += x[j * d + t];
            }
        }
        let inv = nb.len() as f64;
        row[d..].iter_mut().for_each(|v| *v /= inv);
    }
    h
}

fn concat_mean_backward(dh: &[f64], adj: &Adjacency, d: usize) -> Vec<f64> {
    let n = adj.n();
    let mut dx = vec![0.0; n * d];
    for i in 0..n {
        let row = &dh[i * 2 * d..(i + 1) * 2 * d];
        for t in 0..d {
            dx[i * d + t] += row[t];
        }
        let nb = adj.neighbours(i);
        let inv = nb.len() as f64;
        for &j in nb {
            for t in 0..d {
                dx[j * d + t] += row[d + t] / inv;
            }
        }
    }
    dx
}

#[derive(Clone, Debug)]
pub(crate) struct SageCache {
    adj: Adjacency,
    bn_in: Option<BnCache>,
    pre_q: Option<Vec<f64>>,
    h: Vec<f64>,
    w_eff: Vec<f64>,
    pre_gamma: Option<Vec<f64>>,
    pre_act: Vec<f64>,
    y: Vec<f64>,
    norms: Vec<f64>,
}

fn check(x: &DenseTensor, adj: &Adjacency, p: &LayerParams) -> Result<(usize, usize)> {
    let (n, d) = x.expect_matrix("sage input")?;
    if adj.n() != n {
        return Err(Error::Shape(format!("adjacency has {} nodes, features have {n} rows", adj.n())));
    }
    if p.in_dim() != 2 * d {
        return Err(Error::Shape(format!("sage layer expects {}-dim features, got {d}", p.in_dim() / 2)));
    }
    if let Some(RescaleTensor::Rank1 { .. }) = p.gamma {
        return Err(Error::Params("BinSAGE rescaling is channel-wise".into()));
    }
    Ok((n, d))
}

/// `normalize(act((q(W) ⊛ q(BN([x_i ‖ mean x_j]))) ⊙ Γ))`; float SAGE is the
/// same with identity quantizers, no BN and no rescale.
pub(crate) fn sage_forward(x: &DenseTensor, adj: &Adjacency, p: &LayerParams, mode: Mode, record: bool) -> Result<LayerOutput<SageCache>> {
    let (n, d) = check(x, adj, p)?;
    let o = p.out_dim();
    let mut updates = Vec::new();
    let mut h = concat_mean(x.data(), adj, d);
    let mut bn_in = None;
    if let Some(bn) = &p.bn_in {
        let (c, s) = bn_forward(&mut h, 2 * d, bn, 0, mode, record)?;
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
    let mut z = linear(&h, &w_eff, n, 2 * d, o);
    if let Some(b) = &p.bias {
        for r in z.chunks_exact_mut(o.max(1)) {
            r.iter_mut().zip(b).for_each(|(v, bv)| *v += bv);
        }
    }
    let mut pre_gamma = None;
    if let Some(g) = &p.gamma {
        g.check_output(n, o)?;
        if record {
            pre_gamma = Some(z.clone());
        }
        g.apply(&mut z, o);
    }
    let pre_act = if record { z.clone() } else { Vec::new() };
    activation_forward(&mut z, p.flags.activation, p.prelu_slope);
    let norms = l2_normalize_rows(&mut z, o);
    let cache = record.then(|| SageCache {
        adj: adj.clone(),
        bn_in,
        pre_q,
        h,
        w_eff,
        pre_gamma,
        pre_act,
        y: z.clone(),
        norms,
    });
    Ok(LayerOutput {
        y: DenseTensor::matrix(n, o, z)?,
        cache,
        updates,
    })
}

pub(crate) fn sage_backward(p: &LayerParams, c: &SageCache, g: &DenseTensor) -> (DenseTensor, LayerGrads) {
    let (n, o) = (c.adj.n(), p.out_dim());
    let d2 = p.in_dim();
    let mut grads = p.zero_grads();
    let mut dz = g.data().to_vec();
    l2_normalize_backward(&mut dz, &c.y, &c.norms, o);
    grads.prelu_slope = activation_backward(&mut dz, &c.pre_act, p.flags.activation, p.prelu_slope);
    if let (Some(gm), Some(pre)) = (&p.gamma, &c.pre_gamma) {
        let (dg, dpre) = gm.backward(pre, &dz, o);
        grads.gamma = Some(dg);
        dz = dpre;
    }
    if let Some(db) = &mut grads.bias {
        for r in dz.chunks_exact(o.max(1)) {
            db.iter_mut().zip(r).for_each(|(a, b)| *a += b);
        }
    }
    let (mut dh, dw) = linear_backward(&dz, &c.h, &c.w_eff, n, d2, o);
    grads.weights = latent_weight_grad(p, dw);
    if let Some(pre) = &c.pre_q {
        quantize_backward(&mut dh, pre, p.quant.activations);
    }
    if let (Some(bn), Some(bc)) = (&p.bn_in, &c.bn_in) {
        let (ds, dshift) = grads.bn_in.as_mut().expect("bn grads");
        bn_backward(&mut dh, d2, bn, bc, ds, dshift);
    }
    let dx = concat_mean_backward(&dh, &c.adj, d2 / 2);
    (DenseTensor::matrix(n, d2 / 2, dx).expect("input shape"), grads)
}

/// Float GraphSAGE layer with mean aggregation, eval mode.
pub fn sage_float(x: &DenseTensor, adj: &Adjacency, p: &LayerParams) -> Result<DenseTensor> {
    p.validate()?;
    Ok(sage_forward(x, adj, p, Mode::Eval, false)?.y)
}

/// BinSAGE with XNOR/popcount products, eval mode.
pub fn binsage(x: &DenseTensor, adj: &Adjacency, p: &LayerParams) -> Result<DenseTensor> {
    p.validate()?;
    let (n, d) = check(x, adj, p)?;
    let o = p.out_dim();
    let mut h = concat_mean(x.data(), adj, d);
    if let Some(bn) = &p.bn_in {
        bn_forward(&mut h, 2 * d, bn, 0, Mode::Eval, false)?;
    }
    let hb = BitMatrix::pack_signs(&h, n, 2 * d);
    let wb = BitMatrix::pack_signs(p.latent_weights.data(), o, 2 * d);
    let ones = RescaleTensor::ones(o);
    let mut z = binary_gemm(&hb, &wb, &ones)?.into_data();
    if let Some(b) = &p.bias {
        for r in z.chunks_exact_mut(o.max(1)) {
            r.iter_mut().zip(b).for_each(|(v, bv)| *v += bv);
        }
    }
    if let Some(g) = &p.gamma {
        g.check_output(n, o)?;
        g.apply(&mut z, o);
    }
    activation_forward(&mut z, p.flags.activation, p.prelu_slope);
    l2_normalize_rows(&mut z, o);
    DenseTensor::matrix(n, o, z)
}
