//! TOML run configuration. Every key is optional; unknown keys are an
//! error that lists all of them.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::dataset::{ShapeKind, SynthSpec};
use crate::error::{Error, Result};
use crate::model::{ArchSize, DgcnnOptions, ModelSpec, Variant};
use crate::ops::{Activation, BalanceMode};
use crate::training::{LogitMatching, LspConfig, LspSimilarity, TrainConfig, TrainStage};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub data: DataSection,
    pub train: TrainSection,
    pub distill: DistillSection,
    pub bench: BenchSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    /// `float`, `rf`, `bf1` or `bf2`.
    pub variant: String,
    /// `mini` or `full`.
    pub size: String,
    /// Neighbours per node; the size's default when absent.
    pub k: Option<usize>,
    pub points: usize,
    /// `none`, `mean` or `median`.
    pub edge_balance: String,
    pub global_balance: String,
    /// `prelu`, `relu` or `none`.
    pub activation: String,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            variant: "bf1".into(),
            size: "mini".into(),
            k: None,
            points: 128,
            edge_balance: "none".into(),
            global_balance: "none".into(),
            activation: "prelu".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    /// Directory with a manifest; the synthetic task when absent.
    pub path: Option<PathBuf>,
    pub shapes: Vec<String>,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            path: None,
            shapes: ShapeKind::ALL.iter().map(|s| s.name().to_string()).collect(),
            train_per_class: 300,
            test_per_class: 60,
            noise: 0.02,
            seed: 0,
        }
    }
}

/// Overrides of the stage presets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    /// `1`, `2`, `3`, `direct` or `scratch`.
    pub stage: String,
    pub epochs: usize,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub decay_gamma: bool,
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            stage: "scratch".into(),
            epochs: 50,
            batch_size: None,
            lr: None,
            weight_decay: None,
            decay_gamma: false,
            augment: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillSection {
    pub logit_matching: bool,
    pub temperature: f64,
    pub alpha: f64,
    pub lsp: bool,
    pub lsp_weight: f64,
    /// `rbf_l2` or `hamming`.
    pub similarity: String,
    /// Epochs of the three cascade stages.
    pub stage_epochs: [usize; 3],
    /// Start stage 3 from the stage-2 weights.
    pub teacher_init: bool,
}

impl Default for DistillSection {
    fn default() -> Self {
        Self {
            logit_matching: true,
            temperature: 3.0,
            alpha: 0.1,
            lsp: true,
            lsp_weight: 100.0,
            similarity: "rbf_l2".into(),
            stage_epochs: [50, 50, 50],
            teacher_init: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchSection {
    pub runs: usize,
    pub warmup: usize,
    /// `[m, n, d]`: `m x d` times `(n x d)ᵀ`.
    pub gemm: [usize; 3],
    /// `[n, d]`.
    pub pairwise: [usize; 2],
    /// Clouds per end-to-end forward.
    pub batch: usize,
    /// Points per cloud in the end-to-end forward.
    pub points: usize,
    pub full_model: bool,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            runs: 30,
            warmup: 3,
            gemm: [1024, 1024, 256],
            pairwise: [1024, 256],
            batch: 1,
            points: 256,
            full_model: true,
        }
    }
}

fn bad<T>(m: String) -> Result<T> {
    Err(Error::Config(m))
}

fn balance(s: &str) -> Result<Option<BalanceMode>> {
    match s {
        "none" => Ok(None),
        "mean" => Ok(Some(BalanceMode::Mean)),
        "median" => Ok(Some(BalanceMode::Median)),
        _ => bad(format!("unknown balance {s:?} (expected none, mean or median)")),
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut unknown = Vec::new();
        let de = toml::Deserializer::parse(text).map_err(|e| Error::Config(e.to_string()))?;
        let cfg: RunConfig = serde_ignored::deserialize(de, |path| unknown.push(path.to_string()))
            .map_err(|e| Error::Config(e.to_string()))?;
        if !unknown.is_empty() {
            return Err(Error::UnknownKeys(unknown));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.variant()?;
        self.size()?;
        self.activation()?;
        balance(&self.model.edge_balance)?;
        balance(&self.model.global_balance)?;
        self.shapes()?;
        self.stage()?;
        self.similarity()?;
        if self.bench.runs == 0 {
            return bad("bench.runs must be at least 1".into());
        }
        Ok(())
    }

    pub fn variant(&self) -> Result<Variant> {
        Variant::parse(&self.model.variant).ok_or_else(|| {
            Error::Config(format!(
                "unknown variant {:?} (expected float, rf, bf1 or bf2)",
                self.model.variant
            ))
        })
    }

    pub fn size(&self) -> Result<ArchSize> {
        ArchSize::parse(&self.model.size)
            .ok_or_else(|| Error::Config(format!("unknown size {:?} (expected mini or full)", self.model.size)))
    }

    fn activation(&self) -> Result<Activation> {
        match self.model.activation.as_str() {
            "prelu" => Ok(Activation::PRelu),
            "relu" => Ok(Activation::Relu),
            "none" => Ok(Activation::None),
            s => bad(format!("unknown activation {s:?} (expected prelu, relu or none)")),
        }
    }

    pub fn shapes(&self) -> Result<Vec<ShapeKind>> {
        self.data
            .shapes
            .iter()
            .map(|s| ShapeKind::parse(s).ok_or_else(|| Error::Config(format!("unknown shape {s:?}"))))
            .collect()
    }

    pub fn stage(&self) -> Result<TrainStage> {
        TrainStage::parse(&self.train.stage)
    }

    fn similarity(&self) -> Result<LspSimilarity> {
        match self.distill.similarity.as_str() {
            "rbf_l2" => Ok(LspSimilarity::RbfL2),
            "hamming" => Ok(LspSimilarity::Hamming),
            s => bad(format!("unknown similarity {s:?} (expected rbf_l2 or hamming)")),
        }
    }

    /// Architecture for `variant` with this run's sizes and options.
    pub fn model_spec(&self, variant: Variant, classes: usize) -> Result<ModelSpec> {
        let mut o = DgcnnOptions::new(variant, self.size()?, classes, self.model.points);
        if let Some(k) = self.model.k {
            o.k = k;
        }
        o.edge_balance = balance(&self.model.edge_balance)?;
        o.global_balance = balance(&self.model.global_balance)?;
        o.activation = self.activation()?;
        let spec = ModelSpec::dgcnn(&o);
        spec.validate()?;
        Ok(spec)
    }

    pub fn synth_spec(&self) -> Result<SynthSpec> {
        let mut s = SynthSpec::new(
            self.model.points,
            self.data.train_per_class,
            self.data.test_per_class,
            self.data.seed,
        );
        s.shapes = self.shapes()?;
        s.noise = self.data.noise;
        Ok(s)
    }

    /// Stage preset with this run's overrides and distillation settings.
    pub fn train_config(&self, stage: TrainStage, epochs: usize, seed: u64) -> Result<TrainConfig> {
        let mut c = TrainConfig::preset(stage, epochs, seed);
        let t = &self.train;
        if let Some(b) = t.batch_size {
            c.batch_size = b;
        }
        if let Some(lr) = t.lr {
            c.lr = lr;
        }
        if let Some(wd) = t.weight_decay {
            c.weight_decay = wd;
        }
        c.decay_gamma = t.decay_gamma;
        if !t.augment {
            c.augment = None;
        }
        if stage != TrainStage::Scratch {
            let d = &self.distill;
            c.distill.logit_matching = d.logit_matching.then_some(LogitMatching {
                temperature: d.temperature,
                alpha: d.alpha,
            });
            c.distill.lsp = d.lsp.then_some(LspConfig {
                weight: d.lsp_weight,
                similarity: self.similarity()?,
            });
        }
        c.validate()?;
        Ok(c)
    }
}
