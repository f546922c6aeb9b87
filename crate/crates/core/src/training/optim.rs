use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ste::maintain_in_place;
use crate::error::{Error, Result};
use crate::model::{Gradients, Model};
use crate::ops::{Quantizer, TensorRole};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// Optimizer moments and the training RNG.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// First moments, one vector per trainable tensor in canonical order.
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
    /// Completed epochs.
    pub epoch: usize,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(model: &Model, seed: u64) -> Self {
        let zeros: Vec<Vec<f64>> = model
            .layers()
            .flat_map(|p| {
                p.tensors()
                    .into_iter()
                    .filter(|t| t.role.trainable())
                    .map(|t| vec![0.0; t.data.len()])
                    .collect::<Vec<_>>()
            })
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            epoch: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn check(&self, model: &Model) -> Result<()> {
        let sizes: Vec<usize> = model
            .layers()
            .flat_map(|p| p.tensors().into_iter().filter(|t| t.role.trainable()).map(|t| t.data.len()).collect::<Vec<_>>())
            .collect();
        let ok = |x: &Vec<Vec<f64>>| x.len() == sizes.len() && x.iter().zip(&sizes).all(|(a, &n)| a.len() == n);
        if !ok(&self.m) || !ok(&self.v) {
            return Err(Error::Params("optimizer state does not match the model's parameters".into()));
        }
        Ok(())
    }
}

/// Regularization applied with an Adam step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Decay {
    /// ℓ2 weight on latent weights, added to their gradient.
    pub weight_decay: f64,
    /// Also decay the rescaling factors.
    pub include_gamma: bool,
}

/// One Adam update with bias correction, then centring and clipping of the
/// latent weights of every layer whose weights are binarized.
pub fn adam_step(model: &mut Model, grads: &Gradients, state: &mut TrainState, lr: f64, decay: Decay) -> Result<()> {
    state.check(model)?;
    if grads.layers.len() != model.layers().count() {
        return Err(Error::Params("gradient layer count differs from the model".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    let mut slot = 0;
    for (p, g) in model.layers_mut().zip(&grads.layers) {
        let binary = p.quant.weights == Quantizer::Sign;
        let d = p.in_dim();
        let gts = g.tensors();
        for (tensor, gt) in p.trainable_mut().into_iter().zip(gts) {
            if tensor.data.len() != gt.len() {
                return Err(Error::Params("gradient shape differs from its parameter".into()));
            }
            let wd = match tensor.role {
                TensorRole::Weight => decay.weight_decay,
                TensorRole::Gamma(_) if decay.include_gamma => decay.weight_decay,
                _ => 0.0,
            };
            let (m, v) = (&mut state.m[slot], &mut state.v[slot]);
            for (((w, &gr), mi), vi) in tensor.data.iter_mut().zip(gt).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gr = gr + wd * *w;
                *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gr;
                *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gr * gr;
                *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + ADAM_EPSILON);
            }
            if binary && tensor.role == TensorRole::Weight {
                maintain_in_place(tensor.data, d);
            }
            slot += 1;
        }
    }
    Ok(())
}

/// Learning rate multiplied by `factor` at each milestone epoch.
#[derive(Clone, Debug, PartialEq, serde::Deserialize, serde::Serialize)]
pub struct LrSchedule {
    pub factor: f64,
    /// Sorted epoch indices at which the decay applies.
    pub milestones: Vec<usize>,
}

impl LrSchedule {
    /// Decay at 50% and 75% of the epochs.
    pub fn half_and_three_quarters(epochs: usize, factor: f64) -> Self {
        let mut milestones = vec![epochs / 2, epochs * 3 / 4];
        milestones.retain(|&m| m > 0);
        milestones.dedup();
        Self { factor, milestones }
    }

    /// Decay every `every` epochs.
    pub fn every(epochs: usize, every: usize, factor: f64) -> Self {
        let every = every.max(1);
        Self {
            factor,
            milestones: (1..).map(|i| i * every).take_while(|&m| m < epochs).collect(),
        }
    }

    pub fn lr(&self, base: f64, epoch: usize) -> f64 {
        base * self.factor.powi(self.milestones.iter().filter(|&&m| m <= epoch).count() as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.milestones.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Config("learning-rate milestones must be sorted".into()));
        }
        if !(self.factor > 0.0) {
            return Err(Error::Config(format!("learning-rate decay factor {} must be positive", self.factor)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedules() {
        let s = LrSchedule::half_and_three_quarters(8, 0.5);
        assert_eq!(s.milestones, vec![4, 6]);
        assert_eq!(s.lr(1.0, 3), 1.0);
        assert_eq!(s.lr(1.0, 4), 0.5);
        assert_eq!(s.lr(1.0, 7), 0.25);
        assert_eq!(LrSchedule::every(350, 50, 0.5).milestones, vec![50, 100, 150, 200, 250, 300]);
    }
}
