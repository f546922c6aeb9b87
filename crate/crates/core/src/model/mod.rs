//! DGCNN-style point-cloud classifiers assembled from the layer operators.

mod forward;
mod spec;

pub use forward::{BnUpdates, ForwardOptions, ForwardOutput, Gradients, GraphBatch, Tape};
pub use spec::{ArchSize, DgcnnOptions, LayerKind, LayerSpec, ModelSpec, RescaleKind, Stage, Variant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bitcore::RescaleTensor;
use crate::error::{Error, Result};
use crate::ops::{BatchNormParams, LayerParams, Quantizer};
use crate::tensor::DenseTensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    convs: Vec<LayerParams>,
    embed: LayerParams,
    head: Vec<LayerParams>,
}

fn f32_round(v: f64) -> f64 {
    v as f32 as f64
}

fn init_layer(ls: &LayerSpec, spec: &ModelSpec, rng: &mut ChaCha8Rng) -> LayerParams {
    let (o, i) = ls.weight_shape();
    let bound = 1.0 / (i as f64).sqrt();
    let w: Vec<f64> = (0..o * i).map(|_| f32_round(rng.random_range(-bound..bound))).collect();
    LayerParams {
        latent_weights: DenseTensor::matrix(o, i, w).expect("weight shape"),
        bias: ls.bias.then(|| vec![0.0; o]),
        gamma: match ls.rescale {
            RescaleKind::None => None,
            RescaleKind::ChannelWise => Some(RescaleTensor::ones(o)),
            RescaleKind::Rank1 { height, width } => Some(RescaleTensor::Rank1 {
                channel: vec![1.0; o],
                height: vec![1.0; height],
                width: vec![1.0; width],
            }),
        },
        bn_in: ls.bn_in.then(|| BatchNormParams::new(ls.bn_in_channels())),
        bn_out: ls.bn_out.then(|| BatchNormParams::new(o)),
        prelu_slope: 0.25,
        flags: ls.flags,
        quant: spec.quantization(ls),
    }
}

fn check_layer(ls: &LayerSpec, p: &LayerParams, spec: &ModelSpec, what: &str) -> Result<()> {
    p.validate()?;
    let bad = |m: &str| Err(Error::Params(format!("{what}: {m}")));
    if p.latent_weights.shape() != [ls.weight_shape().0, ls.weight_shape().1] {
        return bad("weight shape differs from the model description");
    }
    if p.bias.is_some() != ls.bias || p.bn_in.is_some() != ls.bn_in || p.bn_out.is_some() != ls.bn_out {
        return bad("parameter set differs from the model description");
    }
    let gamma_ok = match (&ls.rescale, &p.gamma) {
        (RescaleKind::None, None) | (RescaleKind::ChannelWise, Some(RescaleTensor::ChannelWise(_))) => true,
        (RescaleKind::Rank1 { height, width }, Some(RescaleTensor::Rank1 { height: h, width: w, .. })) => {
            h.len() == *height && w.len() == *width
        }
        _ => false,
    };
    if !gamma_ok {
        return bad("rescale differs from the model description");
    }
    if p.flags != ls.flags || p.quant != spec.quantization(ls) {
        return bad("flags differ from the model description");
    }
    Ok(())
}

/// Share of weights that are binarized.
#[derive(Clone, Debug, PartialEq)]
pub struct BinarizationReport {
    /// `(kind, weight count, binarized)` for every layer in order.
    pub layers: Vec<(LayerKind, usize, bool)>,
}

impl BinarizationReport {
    /// Fraction of graph and classifier weights that are binary, leaving
    /// out the final classifier layer.
    pub fn fraction_excluding_final(&self) -> f64 {
        let body = &self.layers[..self.layers.len() - 1];
        let total: usize = body.iter().map(|l| l.1).sum();
        let bin: usize = body.iter().filter(|l| l.2).map(|l| l.1).sum();
        bin as f64 / total.max(1) as f64
    }

    pub fn final_layer_binarized(&self) -> bool {
        self.layers.last().is_some_and(|l| l.2)
    }
}

impl Model {
    /// Random initialization; every real parameter is an `f32` value.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let convs = spec.convs.iter().map(|l| init_layer(l, &spec, &mut rng)).collect();
        let embed = init_layer(&spec.embed, &spec, &mut rng);
        let head = spec.head.iter().map(|l| init_layer(l, &spec, &mut rng)).collect();
        Ok(Self {
            spec,
            convs,
            embed,
            head,
        })
    }

    pub fn from_parts(spec: ModelSpec, convs: Vec<LayerParams>, embed: LayerParams, head: Vec<LayerParams>) -> Result<Self> {
        spec.validate()?;
        if convs.len() != spec.convs.len() || head.len() != spec.head.len() {
            return Err(Error::Params("layer count differs from the model description".into()));
        }
        for (l, (s, p)) in spec.convs.iter().zip(&convs).enumerate() {
            check_layer(s, p, &spec, &format!("graph layer {l}"))?;
        }
        check_layer(&spec.embed, &embed, &spec, "embedding")?;
        for (l, (s, p)) in spec.head.iter().zip(&head).enumerate() {
            check_layer(s, p, &spec, &format!("head layer {l}"))?;
        }
        Ok(Self {
            spec,
            convs,
            embed,
            head,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn convs(&self) -> &[LayerParams] {
        &self.convs
    }

    pub fn embed(&self) -> &LayerParams {
        &self.embed
    }

    pub fn head(&self) -> &[LayerParams] {
        &self.head
    }

    /// Layers in canonical order: graph layers, embedding, head.
    pub fn layers(&self) -> impl Iterator<Item = &LayerParams> {
        self.convs.iter().chain(std::iter::once(&self.embed)).chain(&self.head)
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut LayerParams> {
        self.convs.iter_mut().chain(std::iter::once(&mut self.embed)).chain(&mut self.head)
    }

    /// Switches the quantization regime, keeping every parameter.
    pub fn set_stage(&mut self, stage: Stage) {
        if self.spec.variant == Variant::Float {
            return;
        }
        self.spec.stage = stage;
        let quants: Vec<_> = self.spec.layers().map(|l| stage.quantization(&l.flags)).collect();
        for (p, q) in self.layers_mut().zip(quants) {
            p.quant = q;
        }
    }

    /// Rounds every stored value to the nearest `f32`, so the in-memory
    /// model equals its serialized form.
    pub fn round_to_f32(&mut self) {
        for p in self.layers_mut() {
            for t in p.tensors_mut() {
                t.data.iter_mut().for_each(|v| *v = f32_round(*v));
            }
        }
    }

    pub fn binarization(&self) -> BinarizationReport {
        BinarizationReport {
            layers: self
                .spec
                .layers()
                .zip(self.layers())
                .map(|(s, p)| (s.kind, p.latent_weights.len(), p.quant.weights == Quantizer::Sign))
                .collect(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.layers()
            .map(|p| p.tensors().iter().filter(|t| t.role.trainable()).map(|t| t.data.len()).sum::<usize>())
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for v in [Variant::Float, Variant::Rf, Variant::Bf1, Variant::Bf2] {
            for s in [ArchSize::Mini, ArchSize::Full] {
                let spec = ModelSpec::dgcnn(&DgcnnOptions::new(v, s, 40, 64));
                spec.validate().unwrap();
                let m = Model::new(spec, 1).unwrap();
                Model::from_parts(m.spec.clone(), m.convs.clone(), m.embed.clone(), m.head.clone()).unwrap();
            }
        }
    }

    #[test]
    fn xor_layer_must_follow_binary_producer() {
        let mut spec = ModelSpec::dgcnn(&DgcnnOptions::new(Variant::Bf1, ArchSize::Mini, 3, 32));
        spec.convs[0].flags.binary_outputs = false;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn stage_three_binarizes_all_but_final_layer() {
        let m = Model::new(ModelSpec::dgcnn(&DgcnnOptions::new(Variant::Bf2, ArchSize::Full, 40, 64)), 0).unwrap();
        let r = m.binarization();
        assert_eq!(r.fraction_excluding_final(), 1.0);
        assert!(!r.final_layer_binarized());
        let mut m2 = m.clone();
        m2.set_stage(Stage::Two);
        assert_eq!(m2.binarization().fraction_excluding_final(), 0.0);
        assert_eq!(m2.convs[0].latent_weights, m.convs[0].latent_weights);
    }

    #[test]
    fn init_is_f32_exact_and_seeded() {
        let spec = ModelSpec::dgcnn(&DgcnnOptions::new(Variant::Rf, ArchSize::Mini, 3, 32));
        let a = Model::new(spec.clone(), 7).unwrap();
        let mut b = Model::new(spec.clone(), 7).unwrap();
        assert_eq!(a, b);
        b.round_to_f32();
        assert_eq!(a, b);
        assert_ne!(a, Model::new(spec, 8).unwrap());
    }
}
