use crate::bitcore::RescaleTensor;
use crate::error::{Error, Result};
use crate::graph::KnnMetric;
use crate::tensor::DenseTensor;

/// Binarization function applied at a quantization site.
///
/// `Sign` is the deployment quantizer; its backward pass is the
/// straight-through estimator, which is the exact derivative of `HardTanh`.
/// `Tanh` is the smooth surrogate of the first distillation stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Quantizer {
    Identity,
    Tanh,
    Sign,
    HardTanh,
}

impl Quantizer {
    #[inline]
    pub fn forward(self, v: f64) -> f64 {
        match self {
            Quantizer::Identity => v,
            Quantizer::Tanh => v.tanh(),
            Quantizer::Sign => crate::bitcore::sign(v),
            Quantizer::HardTanh => v.clamp(-1.0, 1.0),
        }
    }

    /// Derivative used by backprop; for `Sign` this is `1[|v| <= 1]`.
    #[inline]
    pub fn derivative(self, v: f64) -> f64 {
        match self {
            Quantizer::Identity => 1.0,
            Quantizer::Tanh => {
                let t = v.tanh();
                1.0 - t * t
            }
            Quantizer::Sign | Quantizer::HardTanh => {
                if v.abs() <= 1.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Replaces `Sign` by its smooth-where-it-matters surrogate.
    pub fn surrogate(self) -> Self {
        match self {
            Quantizer::Sign => Quantizer::HardTanh,
            q => q,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    PRelu,
    Relu,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BalanceMode {
    Mean,
    Median,
}

/// Where an XorEdgeConv-style layer normalizes: on every edge message before
/// max aggregation (BF2) or on the aggregated node feature (BF1).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnPlacement {
    PreAggregation,
    PostAggregation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerFlags {
    pub binary_weights: bool,
    pub binary_inputs: bool,
    pub binary_outputs: bool,
    pub bn_placement: BnPlacement,
    pub activation: Activation,
    pub edge_balance: Option<BalanceMode>,
    /// Metric of the graph built on this layer's input.
    pub knn_metric: KnnMetric,
}

impl Default for LayerFlags {
    fn default() -> Self {
        Self {
            binary_weights: false,
            binary_inputs: false,
            binary_outputs: false,
            bn_placement: BnPlacement::PostAggregation,
            activation: Activation::Relu,
            edge_balance: None,
            knn_metric: KnnMetric::L2,
        }
    }
}

/// Quantizers realizing the binarization flags for one training stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Quantization {
    pub weights: Quantizer,
    pub activations: Quantizer,
}

impl Quantization {
    pub const NONE: Quantization = Quantization {
        weights: Quantizer::Identity,
        activations: Quantizer::Identity,
    };
}

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
    /// Weight of the old running statistics in each update.
    pub momentum: f64,
    pub epsilon: f64,
}

impl BatchNormParams {
    /// Identity transform in eval mode.
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            scale: vec![1.0; channels],
            shift: vec![0.0; channels],
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        if [&self.running_mean, &self.running_var, &self.shift]
            .iter()
            .any(|v| v.len() != c)
        {
            return Err(Error::Params("batch norm vectors differ in length".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Params("batch norm epsilon must be positive".into()));
        }
        let all = self
            .running_mean
            .iter()
            .chain(&self.running_var)
            .chain(&self.scale)
            .chain(&self.shift);
        if all.clone().any(|v| !v.is_finite()) {
            return Err(Error::Params("non-finite batch norm statistics".into()));
        }
        if self.running_var.iter().any(|&v| v < 0.0) {
            return Err(Error::Params("negative running variance".into()));
        }
        Ok(())
    }
}

/// Everything one layer owns.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    /// `out x in`, the real latent weights. Binary layers use their signs.
    pub latent_weights: DenseTensor,
    pub bias: Option<Vec<f64>>,
    pub gamma: Option<RescaleTensor>,
    /// Normalization of the layer input, before quantization.
    pub bn_in: Option<BatchNormParams>,
    /// Normalization of the layer output; its position depends on the
    /// operator (see `ops::edge`).
    pub bn_out: Option<BatchNormParams>,
    pub prelu_slope: f64,
    pub flags: LayerFlags,
    pub quant: Quantization,
}

impl LayerParams {
    /// Plain real layer: weights only, ReLU, no normalization.
    pub fn real(latent_weights: DenseTensor) -> Self {
        Self {
            latent_weights,
            bias: None,
            gamma: None,
            bn_in: None,
            bn_out: None,
            prelu_slope: 0.25,
            flags: LayerFlags::default(),
            quant: Quantization::NONE,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.latent_weights.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.latent_weights.cols()
    }

    /// Weights as seen by the forward pass.
    pub fn effective_weights(&self) -> Vec<f64> {
        let q = self.quant.weights;
        self.latent_weights.data().iter().map(|&w| q.forward(w)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let (o, i) = self.latent_weights.expect_matrix("layer weights")?;
        self.latent_weights.check_finite()?;
        if let Some(b) = &self.bias {
            if b.len() != o {
                return Err(Error::Params(format!("bias has {} entries, layer has {o} outputs", b.len())));
            }
        }
        if let Some(g) = &self.gamma {
            if g.channels() != o {
                return Err(Error::Params(format!("rescale has {} channels, layer has {o}", g.channels())));
            }
        }
        if let Some(bn) = &self.bn_in {
            bn.validate()?;
            if bn.channels() != i {
                return Err(Error::Params(format!(
                    "input batch norm has {} channels, layer input is {i}",
                    bn.channels()
                )));
            }
        }
        if let Some(bn) = &self.bn_out {
            bn.validate()?;
            if bn.channels() != o {
                return Err(Error::Params(format!(
                    "output batch norm has {} channels, layer has {o} outputs",
                    bn.channels()
                )));
            }
        }
        if !self.prelu_slope.is_finite() {
            return Err(Error::Params("non-finite PReLU slope".into()));
        }
        Ok(())
    }

    /// Every stored tensor in canonical order: the model file layout and
    /// the parameter order of gradients both follow this.
    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = vec![TensorRef {
            role: TensorRole::Weight,
            rows: self.latent_weights.rows(),
            cols: self.latent_weights.cols(),
            data: self.latent_weights.data(),
        }];
        fn vec_ref(role: TensorRole, v: &[f64]) -> TensorRef<'_> {
            TensorRef {
                role,
                rows: 1,
                cols: v.len(),
                data: v,
            }
        }
        if let Some(b) = &self.bias {
            out.push(vec_ref(TensorRole::Bias, b));
        }
        if let Some(g) = &self.gamma {
            for (i, f) in g.factors().into_iter().enumerate() {
                out.push(vec_ref(TensorRole::Gamma(i as u8), f));
            }
        }
        for (site, bn) in [(BnSite::In, &self.bn_in), (BnSite::Out, &self.bn_out)] {
            if let Some(bn) = bn {
                out.push(vec_ref(TensorRole::BnScale(site), &bn.scale));
                out.push(vec_ref(TensorRole::BnShift(site), &bn.shift));
                out.push(vec_ref(TensorRole::BnMean(site), &bn.running_mean));
                out.push(vec_ref(TensorRole::BnVar(site), &bn.running_var));
            }
        }
        out.push(vec_ref(TensorRole::PreluSlope, std::slice::from_ref(&self.prelu_slope)));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let rows = self.latent_weights.rows();
        let cols = self.latent_weights.cols();
        let mut out = vec![TensorMut {
            role: TensorRole::Weight,
            rows,
            cols,
            data: self.latent_weights.data_mut(),
        }];
        fn vec_mut(role: TensorRole, v: &mut [f64]) -> TensorMut<'_> {
            TensorMut {
                role,
                rows: 1,
                cols: v.len(),
                data: v,
            }
        }
        if let Some(b) = &mut self.bias {
            out.push(vec_mut(TensorRole::Bias, b));
        }
        if let Some(g) = &mut self.gamma {
            for (i, f) in g.factors_mut().into_iter().enumerate() {
                out.push(vec_mut(TensorRole::Gamma(i as u8), f));
            }
        }
        for (site, bn) in [(BnSite::In, &mut self.bn_in), (BnSite::Out, &mut self.bn_out)] {
            if let Some(bn) = bn {
                out.push(vec_mut(TensorRole::BnScale(site), &mut bn.scale));
                out.push(vec_mut(TensorRole::BnShift(site), &mut bn.shift));
                out.push(vec_mut(TensorRole::BnMean(site), &mut bn.running_mean));
                out.push(vec_mut(TensorRole::BnVar(site), &mut bn.running_var));
            }
        }
        out.push(vec_mut(TensorRole::PreluSlope, std::slice::from_mut(&mut self.prelu_slope)));
        out
    }

    pub(crate) fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        for u in updates {
            let bn = match u.site {
                BnSite::In => self.bn_in.as_mut(),
                BnSite::Out => self.bn_out.as_mut(),
            }
            .expect("update for an existing batch norm");
            let m = bn.momentum;
            for c in 0..bn.channels() {
                bn.running_mean[c] = m * bn.running_mean[c] + (1.0 - m) * u.mean[c];
                bn.running_var[c] = m * bn.running_var[c] + (1.0 - m) * u.var[c];
            }
        }
    }

    /// Zeroed gradients with this layer's trainable structure.
    pub fn zero_grads(&self) -> LayerGrads {
        LayerGrads {
            weights: vec![0.0; self.latent_weights.len()],
            bias: self.bias.as_ref().map(|b| vec![0.0; b.len()]),
            gamma: self
                .gamma
                .as_ref()
                .map(|g| g.factors().iter().map(|f| vec![0.0; f.len()]).collect()),
            bn_in: self.bn_in.as_ref().map(|b| (vec![0.0; b.channels()], vec![0.0; b.channels()])),
            bn_out: self.bn_out.as_ref().map(|b| (vec![0.0; b.channels()], vec![0.0; b.channels()])),
            prelu_slope: 0.0,
        }
    }

    /// Mutable views of the trainable tensors, aligned with
    /// [`LayerGrads::tensors`].
    pub fn trainable_mut(&mut self) -> Vec<TensorMut<'_>> {
        self.tensors_mut()
            .into_iter()
            .filter(|t| t.role.trainable())
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BnSite {
    In,
    Out,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TensorRole {
    Weight,
    Bias,
    /// Rescale factor by mode: 0 channel, 1 height, 2 width.
    Gamma(u8),
    BnScale(BnSite),
    BnShift(BnSite),
    BnMean(BnSite),
    BnVar(BnSite),
    PreluSlope,
}

impl TensorRole {
    pub fn trainable(self) -> bool {
        !matches!(self, TensorRole::BnMean(_) | TensorRole::BnVar(_))
    }
}

#[derive(Debug)]
pub struct TensorRef<'a> {
    pub role: TensorRole,
    pub rows: usize,
    pub cols: usize,
    pub data: &'a [f64],
}

#[derive(Debug)]
pub struct TensorMut<'a> {
    pub role: TensorRole,
    pub rows: usize,
    pub cols: usize,
    pub data: &'a mut [f64],
}

/// Batch statistics produced by a training-mode forward pass; folded into
/// the running statistics by the single writer that owns the layer.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub site: BnSite,
    pub mean: Vec<f64>,
    /// Unbiased batch variance.
    pub var: Vec<f64>,
}

/// Gradients of one layer's trainable parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads {
    pub weights: Vec<f64>,
    pub bias: Option<Vec<f64>>,
    pub gamma: Option<Vec<Vec<f64>>>,
    pub bn_in: Option<(Vec<f64>, Vec<f64>)>,
    pub bn_out: Option<(Vec<f64>, Vec<f64>)>,
    pub prelu_slope: f64,
}

impl LayerGrads {
    /// Trainable gradients in canonical tensor order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![&self.weights];
        if let Some(b) = &self.bias {
            out.push(b);
        }
        if let Some(g) = &self.gamma {
            out.extend(g.iter().map(|v| v.as_slice()));
        }
        for (s, h) in [&self.bn_in, &self.bn_out].into_iter().flatten() {
            out.push(s);
            out.push(h);
        }
        out.push(std::slice::from_ref(&self.prelu_slope));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![&mut self.weights];
        if let Some(b) = &mut self.bias {
            out.push(b);
        }
        if let Some(g) = &mut self.gamma {
            out.extend(g.iter_mut().map(|v| v.as_mut_slice()));
        }
        for (s, h) in [&mut self.bn_in, &mut self.bn_out].into_iter().flatten() {
            out.push(s);
            out.push(h);
        }
        out.push(std::slice::from_mut(&mut self.prelu_slope));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full_layer() -> LayerParams {
        let mut p = LayerParams::real(DenseTensor::matrix(3, 4, vec![0.1; 12]).unwrap());
        p.bias = Some(vec![0.0; 3]);
        p.gamma = Some(RescaleTensor::Rank1 {
            channel: vec![1.0; 3],
            height: vec![1.0; 5],
            width: vec![1.0; 2],
        });
        p.bn_in = Some(BatchNormParams::new(4));
        p.bn_out = Some(BatchNormParams::new(3));
        p
    }

    #[test]
    fn gradient_layout_matches_trainable_tensors() {
        let mut p = full_layer();
        p.validate().unwrap();
        let g = p.zero_grads();
        let shapes: Vec<usize> = p.trainable_mut().iter().map(|t| t.data.len()).collect();
        let gshapes: Vec<usize> = g.tensors().iter().map(|t| t.len()).collect();
        assert_eq!(shapes, gshapes);
        assert_eq!(p.tensors().len(), shapes.len() + 4);
    }

    #[test]
    fn validation_catches_mismatches() {
        let mut p = full_layer();
        p.bn_in = Some(BatchNormParams::new(3));
        assert!(p.validate().is_err());
        let mut p = full_layer();
        p.bn_out.as_mut().unwrap().running_var[0] = f64::NAN;
        assert!(p.validate().is_err());
        let mut p = full_layer();
        p.bn_out.as_mut().unwrap().epsilon = 0.0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn sign_derivative_is_closed_window() {
        let q = Quantizer::Sign;
        assert_eq!(q.derivative(0.5), 1.0);
        assert_eq!(q.derivative(1.0), 1.0);
        assert_eq!(q.derivative(-1.0), 1.0);
        assert_eq!(q.derivative(1.5), 0.0);
        assert_eq!(q.forward(0.0), 1.0);
    }
}
