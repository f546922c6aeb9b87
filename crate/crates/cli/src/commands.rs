use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use bgnn_core::io::{
    load_model, load_xyz_dataset, read_bytes, save_checkpoint, save_model, synth_dataset, write_bytes, PointCloudDataset,
    RunConfig, Split, MANIFEST,
};
use bgnn_core::model::{GraphBatch, Model, Variant};
use bgnn_core::training::{
    cascaded_distillation, evaluate, train, CascadeConfig, CascadeObserver, MetricRecord, TrainObserver, TrainStage,
    TrainState,
};
use bgnn_core::DenseTensor;

use crate::manifest::RunManifest;

/// Flags shared by every subcommand.
#[derive(clap::Args, Clone, Debug, Default)]
pub struct Options {
    /// TOML run configuration; built-in defaults when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Input model: the teacher for `train`, the base model for `distill`.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Dataset directory with a manifest.tsv; overrides `data.path`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for the kernels; 1 gives the reference single-thread
    /// run.
    #[arg(long)]
    pub threads: Option<usize>,
    /// 1, 2, 3, direct or scratch.
    #[arg(long)]
    pub stage: Option<String>,
}

impl Options {
    pub fn threads(&self) -> usize {
        self.threads.unwrap_or(1).max(1)
    }

    fn out_dir(&self) -> Result<&Path> {
        let out = self.out.as_deref().context("--out is required")?;
        std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        Ok(out)
    }
}

/// Runs `f` on a dedicated pool of `threads` workers.
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build()?;
    pool.install(f)
}

pub fn load_config(o: &Options) -> Result<RunConfig> {
    match &o.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

pub fn load_data(cfg: &RunConfig, o: &Options) -> Result<PointCloudDataset> {
    match o.data.as_ref().or(cfg.data.path.as_ref()) {
        Some(dir) => load_xyz_dataset(dir).with_context(|| format!("loading dataset {}", dir.display())),
        None => Ok(synth_dataset(&cfg.synth_spec()?)?),
    }
}

pub fn read_model(path: &Path) -> Result<Model> {
    load_model(&read_bytes(path)?).with_context(|| format!("loading model {}", path.display()))
}

fn stage(cfg: &RunConfig, o: &Options) -> Result<TrainStage> {
    Ok(match &o.stage {
        Some(s) => TrainStage::parse(s)?,
        None => cfg.stage()?,
    })
}

/// Appends metric lines and writes a checkpoint after every epoch.
struct EpochWriter {
    log: BufWriter<File>,
    checkpoint: PathBuf,
    error: Option<std::io::Error>,
}

impl EpochWriter {
    fn create(log: &Path, checkpoint: PathBuf) -> Result<Self> {
        let f = File::create(log).with_context(|| format!("creating {}", log.display()))?;
        Ok(Self {
            log: BufWriter::new(f),
            checkpoint,
            error: None,
        })
    }

    fn line(&mut self, s: &str) {
        if let Err(e) = writeln!(self.log, "{s}") {
            self.error.get_or_insert(e);
        }
    }

    fn flush(&mut self) -> bgnn_core::Result<()> {
        let r = match self.error.take() {
            Some(e) => Err(e),
            None => self.log.flush(),
        };
        r.map_err(|e| bgnn_core::Error::Io {
            path: self.checkpoint.clone(),
            source: e,
        })
    }
}

impl TrainObserver for EpochWriter {
    fn metric(&mut self, r: &MetricRecord) {
        self.line(&r.to_string());
    }

    fn epoch_end(&mut self, model: &Model, state: &TrainState) -> bgnn_core::Result<()> {
        self.flush()?;
        write_bytes(&self.checkpoint, &save_checkpoint(model, state)?)
    }
}

struct CascadeWriter([EpochWriter; 3]);

impl CascadeWriter {
    fn get(&mut self, s: TrainStage) -> &mut EpochWriter {
        match s {
            TrainStage::One => &mut self.0[0],
            TrainStage::Two => &mut self.0[1],
            _ => &mut self.0[2],
        }
    }
}

impl CascadeObserver for CascadeWriter {
    fn metric(&mut self, stage: TrainStage, r: &MetricRecord) {
        self.get(stage).metric(r)
    }

    fn epoch_end(&mut self, stage: TrainStage, model: &Model, state: &TrainState) -> bgnn_core::Result<()> {
        self.get(stage).epoch_end(model, state)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: PathBuf,
    pub final_test_accuracy: Option<f64>,
    /// Eval-mode accuracy on the training split after the last epoch.
    pub train_accuracy: Option<f64>,
}

/// Trains `model`, logs to `<prefix>metrics.tsv`, checkpoints to
/// `<prefix>checkpoint.bgnn` and saves `<prefix>model.bgnn`.
fn train_and_save(
    model: &mut Model,
    teacher: Option<&Model>,
    data: &PointCloudDataset,
    cfg: &bgnn_core::training::TrainConfig,
    out: &Path,
    prefix: &str,
) -> Result<TrainOutcome> {
    let mut state = TrainState::new(model, cfg.seed);
    let mut log = EpochWriter::create(
        &out.join(format!("{prefix}metrics.tsv")),
        out.join(format!("{prefix}checkpoint.bgnn")),
    )?;
    let report = train(model, teacher, data, cfg, &mut state, &mut log)?;
    let train_accuracy = final_train_eval(model, data, cfg.epochs, &mut log)?;
    let path = out.join(format!("{prefix}model.bgnn"));
    write_bytes(&path, &save_model(model))?;
    Ok(TrainOutcome {
        model: path,
        final_test_accuracy: report.final_test_accuracy,
        train_accuracy,
    })
}

fn final_train_eval(model: &Model, data: &PointCloudDataset, epochs: usize, log: &mut EpochWriter) -> Result<Option<f64>> {
    if data.indices(Split::Train).is_empty() {
        return Ok(None);
    }
    let acc = evaluate(model, data, Split::Train, 32)?.accuracy;
    log.line(&format!("{}\ttrain\teval_accuracy\t{acc}", epochs.saturating_sub(1)));
    log.flush()?;
    Ok(Some(acc))
}

/// One training run: from scratch, or one distillation stage with the
/// teacher given by `--model`.
pub fn cmd_train(o: &Options) -> Result<TrainOutcome> {
    let cfg = load_config(o)?;
    let stage = stage(&cfg, o)?;
    let seed = o.seed.unwrap_or(cfg.train.seed);
    let out = o.out_dir()?;
    with_threads(o.threads(), || {
        let data = load_data(&cfg, o)?;
        let variant = cfg.variant()?;
        let teacher = o.model.as_deref().map(read_model).transpose()?;
        if stage.needs_teacher() {
            ensure!(teacher.is_some(), "stage {} needs a teacher model (--model)", stage.name());
            ensure!(variant != Variant::Float, "distillation stages train a binary variant, not float");
        }
        let mut model = match (stage, &teacher) {
            (TrainStage::Two, Some(t)) => t.clone(),
            (TrainStage::Three, Some(t)) if cfg.distill.teacher_init => t.clone(),
            _ => Model::new(cfg.model_spec(variant, data.classes())?, seed)?,
        };
        let cloned = stage == TrainStage::Two || (stage == TrainStage::Three && cfg.distill.teacher_init);
        if cloned && model.spec().variant != variant {
            bail!(
                "teacher is a {} model, configured variant is {}",
                model.spec().variant.name(),
                variant.name()
            );
        }
        let tc = cfg.train_config(stage, cfg.train.epochs, seed)?;
        let outcome = train_and_save(&mut model, teacher.as_ref(), &data, &tc, out, "")?;
        let mut m = RunManifest::new("train", cfg.to_toml(), seed, o.threads());
        m.outputs = vec!["model.bgnn".into(), "checkpoint.bgnn".into(), "metrics.tsv".into()];
        m.write(out)?;
        Ok(outcome)
    })
}

#[derive(Clone, Debug)]
pub struct DistillOutcome {
    pub base_test_accuracy: Option<f64>,
    /// Test accuracy of each stage's final model.
    pub stage_test_accuracy: [Option<f64>; 3],
    pub stage_models: [PathBuf; 3],
}

/// Three-stage distillation. Trains the float base model first unless
/// `--model` provides one.
pub fn cmd_distill(o: &Options) -> Result<DistillOutcome> {
    let cfg = load_config(o)?;
    let seed = o.seed.unwrap_or(cfg.train.seed);
    let out = o.out_dir()?;
    with_threads(o.threads(), || {
        let data = load_data(&cfg, o)?;
        let variant = cfg.variant()?;
        ensure!(variant != Variant::Float, "the distillation student must be a binary variant");
        let mut outputs = Vec::new();
        let (base, base_test_accuracy) = match &o.model {
            Some(p) => (read_model(p)?, None),
            None => {
                let mut base = Model::new(cfg.model_spec(Variant::Float, data.classes())?, seed)?;
                let tc = cfg.train_config(TrainStage::Scratch, cfg.train.epochs, seed)?;
                let r = train_and_save(&mut base, None, &data, &tc, out, "base_")?;
                outputs.extend(["base_model.bgnn", "base_checkpoint.bgnn", "base_metrics.tsv"].map(String::from));
                (base, r.final_test_accuracy)
            }
        };
        let e = cfg.distill.stage_epochs;
        let stages = [
            cfg.train_config(TrainStage::One, e[0], seed)?,
            cfg.train_config(TrainStage::Two, e[1], seed)?,
            cfg.train_config(TrainStage::Three, e[2], seed)?,
        ];
        let cc = CascadeConfig {
            student: cfg.model_spec(variant, data.classes())?,
            stages,
            teacher_init: cfg.distill.teacher_init,
            seed,
        };
        let writer = |i: usize| EpochWriter::create(
            &out.join(format!("stage{i}_metrics.tsv")),
            out.join(format!("stage{i}_checkpoint.bgnn")),
        );
        let mut logs = CascadeWriter([writer(1)?, writer(2)?, writer(3)?]);
        let res = cascaded_distillation(&base, &data, &cc, &mut logs)?;
        let mut paths = Vec::new();
        for (i, (m, log)) in res.stages.iter().zip(logs.0.iter_mut()).enumerate() {
            final_train_eval(m, &data, e[i], log)?;
            let p = out.join(format!("stage{}_model.bgnn", i + 1));
            write_bytes(&p, &save_model(m))?;
            for f in ["model.bgnn", "checkpoint.bgnn", "metrics.tsv"] {
                outputs.push(format!("stage{}_{f}", i + 1));
            }
            paths.push(p);
        }
        let mut manifest = RunManifest::new("distill", cfg.to_toml(), seed, o.threads());
        manifest.outputs = outputs;
        manifest.write(out)?;
        Ok(DistillOutcome {
            base_test_accuracy,
            stage_test_accuracy: [0, 1, 2].map(|i| res.reports[i].final_test_accuracy),
            stage_models: paths.try_into().expect("three stages"),
        })
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferOutcome {
    pub predictions: Vec<(usize, usize, usize)>,
    pub accuracy: f64,
}

/// Deployment inference: packed kernels wherever the model is binary.
/// Writes `index<TAB>predicted<TAB>label` per sample, then the accuracy.
pub fn cmd_infer(o: &Options, split: SplitArg, w: &mut dyn Write) -> Result<InferOutcome> {
    let cfg = load_config(o)?;
    let path = o.model.as_deref().context("--model is required")?;
    let predictions = with_threads(o.threads(), || {
        let model = read_model(path)?;
        let data = load_data(&cfg, o)?;
        ensure!(
            data.classes() <= model.spec().classes,
            "dataset has {} classes, model predicts {}",
            data.classes(),
            model.spec().classes
        );
        let idx: Vec<usize> = match split {
            SplitArg::Train => data.indices(Split::Train),
            SplitArg::Val => data.indices(Split::Val),
            SplitArg::Test => data.indices(Split::Test),
            SplitArg::All => (0..data.len()).collect(),
        };
        ensure!(!idx.is_empty(), "no samples in the selected split");
        let mut predictions = Vec::with_capacity(idx.len());
        for chunk in idx.chunks(32) {
            let clouds: Vec<&DenseTensor> = chunk.iter().map(|&i| data.cloud(i)).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| data.label(i)).collect();
            let batch = GraphBatch::new(&clouds, &labels, model.spec().points)?;
            let logits = model.predict_packed(&batch)?;
            for (r, &i) in chunk.iter().enumerate() {
                let row = logits.row(r);
                let p = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
                predictions.push((i, p, data.label(i)));
            }
        }
        Ok(predictions)
    })?;
    for (i, p, l) in &predictions {
        writeln!(w, "{i}\t{p}\t{l}")?;
    }
    let correct = predictions.iter().filter(|(_, p, l)| p == l).count();
    let accuracy = correct as f64 / predictions.len() as f64;
    writeln!(w, "accuracy\t{accuracy}")?;
    Ok(InferOutcome { predictions, accuracy })
}

/// Strips a checkpoint or model file to the deployment format.
pub fn cmd_convert(o: &Options) -> Result<PathBuf> {
    let input = o.model.as_deref().context("--model is required")?;
    let out = o.out.as_deref().context("--out is required")?;
    let mut model = read_model(input)?;
    model.round_to_f32();
    write_bytes(out, &save_model(&model))?;
    Ok(out.to_path_buf())
}

/// Writes the configured dataset as one text file per cloud plus a
/// manifest with numeric labels.
pub fn cmd_synth(o: &Options) -> Result<PathBuf> {
    let mut cfg = load_config(o)?;
    if let Some(s) = o.seed {
        cfg.data.seed = s;
    }
    let out = o.out_dir()?;
    let data = synth_dataset(&cfg.synth_spec()?)?;
    let mut manifest = String::new();
    for i in 0..data.len() {
        let name = format!("cloud_{i:05}.xyz");
        let mut text = String::new();
        let c = data.cloud(i);
        for r in 0..c.rows() {
            let p = c.row(r);
            text.push_str(&format!("{} {} {}\n", p[0], p[1], p[2]));
        }
        std::fs::write(out.join(&name), text)?;
        manifest.push_str(&format!("{name}\t{}\t{}\n", data.label(i), data.split(i).name()));
    }
    std::fs::write(out.join(MANIFEST), manifest)?;
    Ok(out.to_path_buf())
}

/// Runs the benchmark suite; writes `bench.json` and `bench.tsv` when
/// `--out` is given.
pub fn cmd_bench(o: &Options) -> Result<crate::bench::BenchReport> {
    let cfg = load_config(o)?;
    let threads = o.threads();
    let report = with_threads(threads, || crate::bench::run_bench(&cfg.bench, threads))?;
    if o.out.is_some() {
        let out = o.out_dir()?;
        std::fs::write(out.join("bench.json"), serde_json::to_string_pretty(&report)?)?;
        std::fs::write(out.join("bench.tsv"), report.to_tsv())?;
        let mut m = RunManifest::new("bench", cfg.to_toml(), o.seed.unwrap_or(0), threads);
        m.outputs = vec!["bench.json".into(), "bench.tsv".into()];
        m.write(out)?;
    }
    Ok(report)
}
