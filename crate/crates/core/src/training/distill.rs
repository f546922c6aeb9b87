use super::config::{TrainConfig, TrainStage};
use super::optim::TrainState;
use super::trainer::{train, MetricRecord, TrainObserver, TrainReport};
use crate::error::{Error, Result};
use crate::io::PointCloudDataset;
use crate::model::{Model, ModelSpec, Stage, Variant};

/// Students of the three distillation stages with their training reports.
#[derive(Clone, Debug)]
pub struct CascadeResult {
    pub stages: [Model; 3],
    pub reports: [TrainReport; 3],
}

/// Options of the three-stage pipeline.
#[derive(Clone, Debug)]
pub struct CascadeConfig {
    /// Binary architecture shared by every student.
    pub student: ModelSpec,
    pub stages: [TrainConfig; 3],
    /// Start stage 3 from the stage-2 weights instead of a random
    /// initialization.
    pub teacher_init: bool,
    pub seed: u64,
}

/// [`TrainObserver`] for the three stages of the pipeline.
pub trait CascadeObserver {
    fn metric(&mut self, stage: TrainStage, record: &MetricRecord);

    fn epoch_end(&mut self, _stage: TrainStage, _model: &Model, _state: &TrainState) -> Result<()> {
        Ok(())
    }
}

impl<F: FnMut(TrainStage, &MetricRecord)> CascadeObserver for F {
    fn metric(&mut self, stage: TrainStage, record: &MetricRecord) {
        self(stage, record)
    }
}

struct StageObserver<'a> {
    stage: TrainStage,
    inner: &'a mut dyn CascadeObserver,
}

impl TrainObserver for StageObserver<'_> {
    fn metric(&mut self, record: &MetricRecord) {
        self.inner.metric(self.stage, record)
    }

    fn epoch_end(&mut self, model: &Model, state: &TrainState) -> Result<()> {
        self.inner.epoch_end(self.stage, model, state)
    }
}

/// Stage 1 distils the trained base model into a tanh student; stage 2
/// starts from the stage-1 weights with binary activations; stage 3
/// binarizes the weights as well. Each stage's teacher is the previous
/// stage's result.
pub fn cascaded_distillation(
    base: &Model,
    data: &PointCloudDataset,
    cfg: &CascadeConfig,
    sink: &mut dyn CascadeObserver,
) -> Result<CascadeResult> {
    if cfg.student.variant == Variant::Float {
        return Err(Error::Config("the distillation student must be a binary variant".into()));
    }
    let expected = [TrainStage::One, TrainStage::Two, TrainStage::Three];
    for (c, s) in cfg.stages.iter().zip(expected) {
        if c.stage != s {
            return Err(Error::Config(format!("cascade stage {} configured as {}", s.name(), c.stage.name())));
        }
    }
    let mut spec = cfg.student.clone();
    spec.stage = Stage::One;
    let mut s1 = Model::new(spec, cfg.seed)?;
    let r1 = run(&mut s1, base, data, &cfg.stages[0], sink)?;

    let mut s2 = s1.clone();
    s2.set_stage(Stage::Two);
    let r2 = run(&mut s2, &s1, data, &cfg.stages[1], sink)?;

    let mut s3 = if cfg.teacher_init {
        s2.clone()
    } else {
        let mut spec = cfg.student.clone();
        spec.stage = Stage::Three;
        Model::new(spec, cfg.seed.wrapping_add(3))?
    };
    s3.set_stage(Stage::Three);
    let r3 = run(&mut s3, &s2, data, &cfg.stages[2], sink)?;
    Ok(CascadeResult {
        stages: [s1, s2, s3],
        reports: [r1, r2, r3],
    })
}

fn run(
    student: &mut Model,
    teacher: &Model,
    data: &PointCloudDataset,
    cfg: &TrainConfig,
    sink: &mut dyn CascadeObserver,
) -> Result<TrainReport> {
    let mut state = TrainState::new(student, cfg.seed);
    let mut obs = StageObserver {
        stage: cfg.stage,
        inner: sink,
    };
    train(student, Some(teacher), data, cfg, &mut state, &mut obs)
}
