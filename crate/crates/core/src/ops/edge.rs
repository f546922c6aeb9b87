//! EdgeConv and its binary variants.
//!
//! Every variant computes per-edge messages from `X̃ = [a_i ‖ b_ij]` and
//! max-aggregates them per node. The weight matrix splits the same way, so
//! the node half `a_i Θ_aᵀ` is computed once per node rather than once per
//! edge:
//!
//! * float: `a_i = x_i`, `b_ij = x_j - x_i`; since `b` is linear in `x`, the
//!   edge half is `x_j Θ_bᵀ - x_i Θ_bᵀ`, also per node.
//! * BinEdgeConv: `a_i = q(BN(x_i))`, `b_ij = q(BN(x_j - x_i))`.
//! * XorEdgeConv: `a_i = x_i`, `b_ij = -x_j ⊙ x_i`, which for ±1 features
//!   is the XOR of the two codes.
//!
//! After the dot products all variants share [`tail_forward`], so the packed
//! inference kernels and the float emulation agree bit for bit.

use super::activation::{activation_backward, activation_forward, quantize, quantize_backward};
use super::balance::{balance_segments, balance_segments_backward, BalanceCache};
use super::dense::{latent_weight_grad, linear, linear_backward};
use super::norm::{bn_backward, bn_forward, BnCache};
use super::params::{BnPlacement, BnSite, BnUpdate, LayerGrads, LayerParams, Mode, Quantization, Quantizer};
use super::LayerOutput;
use crate::bitcore::{xnor_gemm_int, BitMatrix};
use crate::error::{Error, Result};
use crate::graph::GraphTopology;
use crate::profile::{self, Category};
use crate::tensor::DenseTensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EdgeKind {
    Float,
    Bin,
    Xor,
}

impl EdgeKind {
    pub(crate) fn check(self, p: &LayerParams, n: usize, d: usize, topo: &GraphTopology) -> Result<()> {
        if topo.n() != n {
            return Err(Error::Shape(format!("graph has {} nodes, features have {n} rows", topo.n())));
        }
        if p.in_dim() != 2 * d {
            return Err(Error::Shape(format!(
                "edge layer expects {}-dim node features, got {d}",
                p.in_dim() / 2
            )));
        }
        match self {
            EdgeKind::Float => {}
            EdgeKind::Bin => {
                if !p.flags.binary_weights {
                    return Err(Error::Params("BinEdgeConv requires binary weights".into()));
                }
            }
            EdgeKind::Xor => {
                if !(p.flags.binary_weights && p.flags.binary_inputs && p.flags.binary_outputs) {
                    return Err(Error::Params(
                        "XorEdgeConv requires binary weights, inputs and outputs".into(),
                    ));
                }
                if p.bn_in.is_some() {
                    return Err(Error::Params("XorEdgeConv takes binary inputs and has no input batch norm".into()));
                }
            }
        }
        Ok(())
    }
}

/// Splits `o x 2d` weights into the node and edge halves.
fn split_weights(w: &[f64], o: usize, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut wa = Vec::with_capacity(o * d);
    let mut wb = Vec::with_capacity(o * d);
    for r in w.chunks_exact(2 * d) {
        wa.extend_from_slice(&r[..d]);
        wb.extend_from_slice(&r[d..]);
    }
    (wa, wb)
}

fn join_weights(wa: &[f64], wb: &[f64], d: usize) -> Vec<f64> {
    let mut w = Vec::with_capacity(wa.len() * 2);
    for (a, b) in wa.chunks_exact(d).zip(wb.chunks_exact(d)) {
        w.extend_from_slice(a);
        w.extend_from_slice(b);
    }
    w
}

/// `x_j - x_i` for every edge, `(n k) x d`.
fn diff_edges(x: &[f64], nb: &[usize], k: usize, d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(nb.len() * d);
    for (e, &j) in nb.iter().enumerate() {
        let i = e / k;
        let (xi, xj) = (&x[i * d..(i + 1) * d], &x[j * d..(j + 1) * d]);
        out.extend(xj.iter().zip(xi).map(|(b, a)| b - a));
    }
    out
}

/// `-x_j ⊙ x_i` for every edge.
fn xor_edges(x: &[f64], nb: &[usize], k: usize, d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(nb.len() * d);
    for (e, &j) in nb.iter().enumerate() {
        let i = e / k;
        let (xi, xj) = (&x[i * d..(i + 1) * d], &x[j * d..(j + 1) * d]);
        out.extend(xj.iter().zip(xi).map(|(b, a)| -b * a));
    }
    out
}

/// `z_ij = node_i + edge_ij`.
fn add_node_part(node: &[f64], edge: &mut [f64], k: usize, o: usize) {
    for (e, row) in edge.chunks_exact_mut(o).enumerate() {
        let u = &node[(e / k) * o..(e / k + 1) * o];
        for (v, a) in row.iter_mut().zip(u) {
            *v = a + *v;
        }
    }
}

/// Sums edge rows into their source node.
fn reduce_to_nodes(dz: &[f64], n: usize, k: usize, o: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * o];
    for (e, row) in dz.chunks_exact(o).enumerate() {
        let u = &mut out[(e / k) * o..(e / k + 1) * o];
        for (a, v) in u.iter_mut().zip(row) {
            *a += v;
        }
    }
    out
}

#[derive(Clone, Debug)]
pub(crate) struct TailCache {
    pre_gamma: Option<Vec<f64>>,
    bn_pre_act: Option<BnCache>,
    pre_act: Vec<f64>,
    bn_edge: Option<BnCache>,
    argmax: Vec<u32>,
    bn_node: Option<BnCache>,
    balance: Option<BalanceCache>,
    segments: Vec<usize>,
    pre_q_out: Option<Vec<f64>>,
}

/// Everything after the dot products: rescale, normalization, activation,
/// max aggregation, balance and output quantization. `z` is `(n k) x o`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn tail_forward(
    kind: EdgeKind,
    mut z: Vec<f64>,
    n: usize,
    k: usize,
    segments: &[usize],
    p: &LayerParams,
    mode: Mode,
    record: bool,
    updates: &mut Vec<BnUpdate>,
) -> Result<(Vec<f64>, Option<TailCache>)> {
    let o = p.out_dim();
    let m = n * k;
    let mut out_stats: Option<(Vec<f64>, Vec<f64>)> = None;
    let mut pre_gamma = None;
    if let Some(g) = &p.gamma {
        g.check_output(m, o)?;
        if record {
            pre_gamma = Some(z.clone());
        }
        g.apply(&mut z, o);
    }
    let mut bn_pre_act = None;
    let mut bn_edge = None;
    let mut bn_node = None;
    // The float operator normalizes before its activation; binary ones
    // after it, either per edge (BF2) or per aggregated node (BF1).
    let bn_out = p.bn_out.as_ref();
    if let (Some(bn), EdgeKind::Float) = (bn_out, kind) {
        let (c, s) = bn_forward(&mut z, o, bn, 0, mode, record)?;
        bn_pre_act = c;
        out_stats = s;
    }
    let pre_act = if record { z.clone() } else { Vec::new() };
    activation_forward(&mut z, p.flags.activation, p.prelu_slope);
    let binary_bn = bn_out.filter(|_| kind != EdgeKind::Float);
    if let Some(bn) = binary_bn.filter(|_| p.flags.bn_placement == BnPlacement::PreAggregation) {
        let (c, s) = bn_forward(&mut z, o, bn, 0, mode, record)?;
        bn_edge = c;
        out_stats = s;
    }
    let mut y = vec![0.0; n * o];
    let mut argmax = if record { vec![0u32; n * o] } else { Vec::new() };
    for i in 0..n {
        let yr = &mut y[i * o..(i + 1) * o];
        yr.copy_from_slice(&z[i * k * o..(i * k + 1) * o]);
        for s in 1..k {
            let zr = &z[(i * k + s) * o..(i * k + s + 1) * o];
            for c in 0..o {
                if zr[c] > yr[c] {
                    yr[c] = zr[c];
                    if record {
                        argmax[i * o + c] = s as u32;
                    }
                }
            }
        }
    }
    if let Some(bn) = binary_bn.filter(|_| p.flags.bn_placement == BnPlacement::PostAggregation) {
        let (c, s) = bn_forward(&mut y, o, bn, 0, mode, record)?;
        bn_node = c;
        out_stats = s;
    }
    if let Some((mean, var)) = out_stats {
        updates.push(BnUpdate {
            site: BnSite::Out,
            mean,
            var,
        });
    }
    let balance = p.flags.edge_balance.map(|mode| balance_segments(&mut y, o, segments, mode));
    let mut pre_q_out = None;
    if p.flags.binary_outputs {
        if record {
            pre_q_out = Some(y.clone());
        }
        quantize(&mut y, p.quant.activations);
    }
    let cache = record.then(|| TailCache {
        pre_gamma,
        bn_pre_act,
        pre_act,
        bn_edge,
        argmax,
        bn_node,
        balance,
        segments: segments.to_vec(),
        pre_q_out,
    });
    Ok((y, cache))
}

/// Returns the gradient with respect to the pre-rescale messages `z`.
fn tail_backward(p: &LayerParams, c: &TailCache, g: &[f64], n: usize, k: usize, grads: &mut LayerGrads) -> Vec<f64> {
    let o = p.out_dim();
    let mut gy = g.to_vec();
    if let Some(pre) = &c.pre_q_out {
        quantize_backward(&mut gy, pre, p.quant.activations);
    }
    if let Some(b) = &c.balance {
        balance_segments_backward(&mut gy, o, &c.segments, b);
    }
    let bn = p.bn_out.as_ref();
    if let (Some(bn), Some(bc)) = (bn, &c.bn_node) {
        let (ds, dh) = grads.bn_out.as_mut().expect("bn grads");
        bn_backward(&mut gy, o, bn, bc, ds, dh);
    }
    let mut dz = vec![0.0; n * k * o];
    for i in 0..n {
        for ch in 0..o {
            let s = c.argmax[i * o + ch] as usize;
            dz[(i * k + s) * o + ch] = gy[i * o + ch];
        }
    }
    if let (Some(bn), Some(bc)) = (bn, &c.bn_edge) {
        let (ds, dh) = grads.bn_out.as_mut().expect("bn grads");
        bn_backward(&mut dz, o, bn, bc, ds, dh);
    }
    grads.prelu_slope = activation_backward(&mut dz, &c.pre_act, p.flags.activation, p.prelu_slope);
    if let (Some(bn), Some(bc)) = (bn, &c.bn_pre_act) {
        let (ds, dh) = grads.bn_out.as_mut().expect("bn grads");
        bn_backward(&mut dz, o, bn, bc, ds, dh);
    }
    if let (Some(gm), Some(pre)) = (&p.gamma, &c.pre_gamma) {
        let (dg, dpre) = gm.backward(pre, &dz, o);
        grads.gamma = Some(dg);
        dz = dpre;
    }
    dz
}

#[derive(Clone, Debug)]
pub(crate) struct EdgeCache {
    kind: EdgeKind,
    n: usize,
    k: usize,
    d: usize,
    neighbours: Vec<usize>,
    /// Layer input (float and XOR paths differentiate through it).
    x: Vec<f64>,
    /// Node-half GEMM input, `n x d`.
    a: Vec<f64>,
    /// Edge-half GEMM input, `(n k) x d`; empty for the float path.
    b: Vec<f64>,
    bn_a: Option<BnCache>,
    bn_b: Option<BnCache>,
    pre_qa: Option<Vec<f64>>,
    pre_qb: Option<Vec<f64>>,
    wa: Vec<f64>,
    wb: Vec<f64>,
    tail: TailCache,
}

/// Forward pass of one edge-convolution layer over a batch of graphs whose
/// node rows are delimited by `segments`; `topo` spans the whole batch.
#[allow(clippy::too_many_arguments)]
pub(crate) fn edge_forward(
    kind: EdgeKind,
    x: &DenseTensor,
    topo: &GraphTopology,
    segments: &[usize],
    p: &LayerParams,
    mode: Mode,
    record: bool,
) -> Result<LayerOutput<EdgeCache>> {
    let (n, d) = x.expect_matrix("edge layer input")?;
    kind.check(p, n, d, topo)?;
    let (k, o) = (topo.k(), p.out_dim());
    let nb = topo.edges();
    let (wa, wb) = split_weights(&p.effective_weights(), o, d);
    let mut updates = Vec::new();
    let xs = x.data();
    let mut bn_a = None;
    let mut bn_b = None;
    let mut pre_qa = None;
    let mut pre_qb = None;
    let (a, b, z) = match kind {
        EdgeKind::Float => {
            let u = linear(xs, &wa, n, d, o);
            let w = linear(xs, &wb, n, d, o);
            let node: Vec<f64> = u.iter().zip(&w).map(|(a, b)| a - b).collect();
            let mut z = Vec::with_capacity(n * k * o);
            for &j in nb {
                z.extend_from_slice(&w[j * o..(j + 1) * o]);
            }
            add_node_part(&node, &mut z, k, o);
            (xs.to_vec(), Vec::new(), z)
        }
        EdgeKind::Bin => {
            let mut a = xs.to_vec();
            let mut b = profile::time(Category::Gather, || diff_edges(xs, nb, k, d));
            if let Some(bn) = &p.bn_in {
                let (ca, sa) = bn_forward(&mut a, d, bn, 0, mode, record)?;
                let (cb, sb) = bn_forward(&mut b, d, bn, d, mode, record)?;
                bn_a = ca;
                bn_b = cb;
                if let (Some((ma, va)), Some((mb, vb))) = (sa, sb) {
                    updates.push(BnUpdate {
                        site: BnSite::In,
                        mean: [ma, mb].concat(),
                        var: [va, vb].concat(),
                    });
                }
            }
            if p.flags.binary_inputs {
                if record {
                    pre_qa = Some(a.clone());
                    pre_qb = Some(b.clone());
                }
                quantize(&mut a, p.quant.activations);
                quantize(&mut b, p.quant.activations);
            }
            let u = linear(&a, &wa, n, d, o);
            let mut z = linear(&b, &wb, n * k, d, o);
            add_node_part(&u, &mut z, k, o);
            (a, b, z)
        }
        EdgeKind::Xor => {
            let b = profile::time(Category::Gather, || xor_edges(xs, nb, k, d));
            let u = linear(xs, &wa, n, d, o);
            let mut z = linear(&b, &wb, n * k, d, o);
            add_node_part(&u, &mut z, k, o);
            (xs.to_vec(), b, z)
        }
    };
    let (y, tail) = profile::time(Category::BnAct, || tail_forward(kind, z, n, k, segments, p, mode, record, &mut updates))?;
    let cache = tail.map(|tail| EdgeCache {
        kind,
        n,
        k,
        d,
        neighbours: nb.to_vec(),
        x: if kind == EdgeKind::Xor { xs.to_vec() } else { Vec::new() },
        a,
        b,
        bn_a,
        bn_b,
        pre_qa,
        pre_qb,
        wa,
        wb,
        tail,
    });
    Ok(LayerOutput {
        y: DenseTensor::matrix(n, o, y)?,
        cache,
        updates,
    })
}

pub(crate) fn edge_backward(p: &LayerParams, c: &EdgeCache, g: &DenseTensor) -> (DenseTensor, LayerGrads) {
    let (n, k, d, o) = (c.n, c.k, c.d, p.out_dim());
    let mut grads = p.zero_grads();
    let dz = tail_backward(p, &c.tail, g.data(), n, k, &mut grads);
    let du = reduce_to_nodes(&dz, n, k, o);
    let mut dx = vec![0.0; n * d];
    let (dwa, dwb) = match c.kind {
        EdgeKind::Float => {
            // z_ij = (u_i - w_i) + w_j
            let mut dw = vec![0.0; n * o];
            for (e, &j) in c.neighbours.iter().enumerate() {
                let row = &dz[e * o..(e + 1) * o];
                for (a, v) in dw[j * o..(j + 1) * o].iter_mut().zip(row) {
                    *a += v;
                }
            }
            for (a, v) in dw.iter_mut().zip(&du) {
                *a -= v;
            }
            let (dx1, dwa) = linear_backward(&du, &c.a, &c.wa, n, d, o);
            let (dx2, dwb) = linear_backward(&dw, &c.a, &c.wb, n, d, o);
            for ((t, a), b) in dx.iter_mut().zip(&dx1).zip(&dx2) {
                *t = a + b;
            }
            (dwa, dwb)
        }
        EdgeKind::Bin => {
            let (mut da, dwa) = linear_backward(&du, &c.a, &c.wa, n, d, o);
            let (mut db, dwb) = linear_backward(&dz, &c.b, &c.wb, n * k, d, o);
            if let Some(pre) = &c.pre_qa {
                quantize_backward(&mut da, pre, p.quant.activations);
            }
            if let Some(pre) = &c.pre_qb {
                quantize_backward(&mut db, pre, p.quant.activations);
            }
            if let (Some(bn), Some(ca), Some(cb)) = (&p.bn_in, &c.bn_a, &c.bn_b) {
                let (ds, dh) = grads.bn_in.as_mut().expect("bn grads");
                bn_backward(&mut da, d, bn, ca, ds, dh);
                bn_backward(&mut db, d, bn, cb, ds, dh);
            }
            dx.copy_from_slice(&da);
            for (e, &j) in c.neighbours.iter().enumerate() {
                let i = e / k;
                for t in 0..d {
                    let v = db[e * d + t];
                    dx[j * d + t] += v;
                    dx[i * d + t] -= v;
                }
            }
            (dwa, dwb)
        }
        EdgeKind::Xor => {
            let (da, dwa) = linear_backward(&du, &c.a, &c.wa, n, d, o);
            let (db, dwb) = linear_backward(&dz, &c.b, &c.wb, n * k, d, o);
            dx.copy_from_slice(&da);
            for (e, &j) in c.neighbours.iter().enumerate() {
                let i = e / k;
                for t in 0..d {
                    let v = db[e * d + t];
                    dx[i * d + t] -= v * c.x[j * d + t];
                    dx[j * d + t] -= v * c.x[i * d + t];
                }
            }
            (dwa, dwb)
        }
    };
    grads.weights = latent_weight_grad(p, join_weights(&dwa, &dwb, d));
    (DenseTensor::matrix(n, d, dx).expect("input shape"), grads)
}

/// Input to the packed inference path.
#[derive(Clone, Copy, Debug)]
pub(crate) enum PackedInput<'a> {
    Real(&'a DenseTensor),
    Bits(&'a BitMatrix),
}

/// Eval-mode forward of a binary edge layer with XNOR/popcount dot
/// products. Quantizers are `sign` regardless of `p.quant`.
pub(crate) fn edge_forward_packed(
    kind: EdgeKind,
    input: PackedInput<'_>,
    topo: &GraphTopology,
    segments: &[usize],
    p: &LayerParams,
) -> Result<DenseTensor> {
    let (n, d) = match input {
        PackedInput::Real(x) => x.expect_matrix("edge layer input")?,
        PackedInput::Bits(b) => (b.rows(), b.dim()),
    };
    kind.check(p, n, d, topo)?;
    let (k, o) = (topo.k(), p.out_dim());
    let nb = topo.edges();
    let (wa, wb) = split_weights(p.latent_weights.data(), o, d);
    let wa = BitMatrix::pack_signs(&wa, o, d);
    let wb = BitMatrix::pack_signs(&wb, o, d);
    let (a, b) = match (kind, input) {
        (EdgeKind::Bin, PackedInput::Real(x)) => {
            let mut a = x.data().to_vec();
            let mut b = profile::time(Category::Gather, || diff_edges(x.data(), nb, k, d));
            if let Some(bn) = &p.bn_in {
                bn_forward(&mut a, d, bn, 0, Mode::Eval, false)?;
                bn_forward(&mut b, d, bn, d, Mode::Eval, false)?;
            }
            profile::time(Category::Gather, || (BitMatrix::pack_signs(&a, n, d), BitMatrix::pack_signs(&b, n * k, d)))
        }
        (EdgeKind::Xor, PackedInput::Bits(x)) => {
            let wpr = x.words_per_row();
            let mut words = Vec::with_capacity(n * k * wpr);
            for (e, &j) in nb.iter().enumerate() {
                let (xi, xj) = (x.row_words(e / k), x.row_words(j));
                words.extend(xi.iter().zip(xj).map(|(p, q)| p ^ q));
            }
            (x.clone(), BitMatrix::from_words(n * k, d, words)?)
        }
        _ => {
            return Err(Error::Params(format!("{kind:?} layer cannot run on this packed input")));
        }
    };
    let (u, v) = profile::time(Category::Gemm, || -> Result<_> {
        Ok((xnor_gemm_int(&a, &wa)?, xnor_gemm_int(&b, &wb)?))
    })?;
    let u: Vec<f64> = u.into_iter().map(f64::from).collect();
    let mut z: Vec<f64> = v.into_iter().map(f64::from).collect();
    add_node_part(&u, &mut z, k, o);
    let mut params = p.clone();
    params.quant = Quantization {
        weights: Quantizer::Sign,
        activations: Quantizer::Sign,
    };
    let (y, _) = profile::time(Category::BnAct, || {
        tail_forward(kind, z, n, k, segments, &params, Mode::Eval, false, &mut Vec::new())
    })?;
    DenseTensor::matrix(n, o, y)
}

/// Float EdgeConv: `x'_i = max_j act(BN(Θ [x_i ‖ x_j - x_i]))`, eval mode.
pub fn edgeconv_float(x: &DenseTensor, topo: &GraphTopology, p: &LayerParams) -> Result<DenseTensor> {
    p.validate()?;
    Ok(edge_forward(EdgeKind::Float, x, topo, &[0, x.rows()], p, Mode::Eval, false)?.y)
}

/// BinEdgeConv on real node features with XNOR/popcount products:
/// `x'_i = max_j σ((sign Θ ⊛ sign BN(X̃)) ⊙ Γ)`, eval mode.
pub fn binedgeconv(x: &DenseTensor, topo: &GraphTopology, p: &LayerParams) -> Result<DenseTensor> {
    p.validate()?;
    edge_forward_packed(EdgeKind::Bin, PackedInput::Real(x), topo, &[0, x.rows()], p)
}

/// XorEdgeConv on packed node codes; the output is re-packed.
pub fn xoredgeconv(x: &BitMatrix, topo: &GraphTopology, p: &LayerParams) -> Result<BitMatrix> {
    p.validate()?;
    if !p.flags.binary_outputs {
        return Err(Error::Params("XorEdgeConv must produce binary outputs".into()));
    }
    let y = edge_forward_packed(EdgeKind::Xor, PackedInput::Bits(x), topo, &[0, x.rows()], p)?;
    BitMatrix::pack(&y)
}

/// The same layer through real arithmetic with `p.quant` at every
/// quantization site, eval mode. With `sign` quantizers this is the float
/// emulation of the packed operators.
pub fn edge_conv_emulated(kind: EdgeKind, x: &DenseTensor, topo: &GraphTopology, p: &LayerParams) -> Result<DenseTensor> {
    p.validate()?;
    Ok(edge_forward(kind, x, topo, &[0, x.rows()], p, Mode::Eval, false)?.y)
}
