use serde::{Deserialize, Serialize};

use super::loss::LspSimilarity;
use super::optim::{Decay, LrSchedule};
use crate::error::{Error, Result};
use crate::model::Stage;

/// Which training regime a run follows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainStage {
    /// tanh in place of sign, real weights; distilled from the base model.
    #[serde(rename = "1")]
    One,
    /// Binary activations, real weights; distilled from stage 1.
    #[serde(rename = "2")]
    Two,
    /// Binary activations and weights; distilled from stage 2.
    #[serde(rename = "3")]
    Three,
    /// Fully binary, distilled straight from the base model.
    Direct,
    /// Task loss only, no teacher.
    Scratch,
}

impl TrainStage {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "1" => Ok(Self::One),
            "2" => Ok(Self::Two),
            "3" => Ok(Self::Three),
            "direct" => Ok(Self::Direct),
            "scratch" => Ok(Self::Scratch),
            _ => Err(Error::Config(format!("unknown stage {s:?} (expected 1, 2, 3, direct or scratch)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::One => "1",
            Self::Two => "2",
            Self::Three => "3",
            Self::Direct => "direct",
            Self::Scratch => "scratch",
        }
    }

    /// Quantization regime of the trained model.
    pub fn model_stage(self) -> Stage {
        match self {
            Self::One => Stage::One,
            Self::Two => Stage::Two,
            Self::Three | Self::Direct | Self::Scratch => Stage::Three,
        }
    }

    pub fn needs_teacher(self) -> bool {
        self != Self::Scratch
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogitMatching {
    pub temperature: f64,
    pub alpha: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LspConfig {
    pub weight: f64,
    pub similarity: LspSimilarity,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub logit_matching: Option<LogitMatching>,
    pub lsp: Option<LspConfig>,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            logit_matching: Some(LogitMatching {
                temperature: 3.0,
                alpha: 0.1,
            }),
            lsp: Some(LspConfig {
                weight: 100.0,
                similarity: LspSimilarity::RbfL2,
            }),
        }
    }
}

/// Random anisotropic scaling and clipped per-point jitter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Augment {
    pub scale_low: f64,
    pub scale_high: f64,
    pub jitter_sigma: f64,
    pub jitter_clip: f64,
}

impl Default for Augment {
    fn default() -> Self {
        Self {
            scale_low: 2.0 / 3.0,
            scale_high: 1.5,
            jitter_sigma: 0.01,
            jitter_clip: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: TrainStage,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub weight_decay: f64,
    /// Apply weight decay to the rescaling factors too.
    pub decay_gamma: bool,
    pub distill: DistillConfig,
    pub augment: Option<Augment>,
    pub seed: u64,
}

impl TrainConfig {
    /// Defaults per stage: learning rates 1e-3 / 2.5e-4 / 1e-3, halving at
    /// 50% and 75% of the epochs for stages 1 and 2 and the base model, and
    /// every 1/7 of the epochs for fully binary training; weight decay 1e-5
    /// in stages 1 and 2 only.
    pub fn preset(stage: TrainStage, epochs: usize, seed: u64) -> Self {
        let (lr, schedule, wd) = match stage {
            TrainStage::One => (1e-3, LrSchedule::half_and_three_quarters(epochs, 0.5), 1e-5),
            TrainStage::Two => (2.5e-4, LrSchedule::half_and_three_quarters(epochs, 0.5), 1e-5),
            TrainStage::Three | TrainStage::Direct => (1e-3, LrSchedule::every(epochs, epochs.div_ceil(7), 0.5), 0.0),
            TrainStage::Scratch => (1e-3, LrSchedule::half_and_three_quarters(epochs, 0.5), 0.0),
        };
        Self {
            stage,
            epochs,
            batch_size: 16,
            lr,
            lr_schedule: schedule,
            weight_decay: wd,
            decay_gamma: false,
            distill: if stage == TrainStage::Scratch {
                DistillConfig {
                    logit_matching: None,
                    lsp: None,
                }
            } else {
                DistillConfig::default()
            },
            augment: Some(Augment::default()),
            seed,
        }
    }

    pub fn decay(&self) -> Decay {
        Decay {
            weight_decay: self.weight_decay,
            include_gamma: self.decay_gamma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight decay {} must be non-negative", self.weight_decay));
        }
        self.lr_schedule.validate()?;
        if let Some(lm) = self.distill.logit_matching {
            if !(lm.temperature > 0.0) {
                return bad(format!("temperature {} must be positive", lm.temperature));
            }
            if !(0.0..=1.0).contains(&lm.alpha) {
                return bad(format!("alpha {} outside [0, 1]", lm.alpha));
            }
        }
        if let Some(l) = self.distill.lsp {
            if !(l.weight >= 0.0) {
                return bad(format!("LSP weight {} must be non-negative", l.weight));
            }
        }
        if let Some(a) = self.augment {
            if !(0.0 < a.scale_low && a.scale_low <= a.scale_high) || a.jitter_sigma < 0.0 || a.jitter_clip < 0.0 {
                return bad("augmentation ranges are invalid".into());
            }
        }
        Ok(())
    }
}
