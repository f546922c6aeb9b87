use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{Augment, TrainConfig};
use super::loss::{cross_entropy, logit_matching_loss, lsp_loss_grad};
use super::optim::{adam_step, TrainState};
use crate::error::{Error, Result};
use crate::io::{PointCloudDataset, Split};
use crate::model::{ForwardOptions, GraphBatch, Model};
use crate::tensor::DenseTensor;

/// One metric-log line: `epoch<TAB>split<TAB>metric<TAB>value`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub epoch: usize,
    pub split: &'static str,
    pub metric: &'static str,
    pub value: f64,
}

impl fmt::Display for MetricRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}\t{}\t{}", self.epoch, self.split, self.metric, self.value)
    }
}

/// Receives metrics as they are produced and the model after every epoch.
/// Any `FnMut(&MetricRecord)` closure is an observer that ignores epochs.
pub trait TrainObserver {
    fn metric(&mut self, record: &MetricRecord);

    fn epoch_end(&mut self, _model: &Model, _state: &TrainState) -> Result<()> {
        Ok(())
    }
}

impl<F: FnMut(&MetricRecord)> TrainObserver for F {
    fn metric(&mut self, record: &MetricRecord) {
        self(record)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub predictions: Vec<usize>,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub history: Vec<MetricRecord>,
    pub final_train_accuracy: Option<f64>,
    pub final_test_accuracy: Option<f64>,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Eval-mode logits for the samples `idx`, in batches.
pub fn predict_indices(model: &Model, data: &PointCloudDataset, idx: &[usize], batch_size: usize) -> Result<DenseTensor> {
    let mut rows = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(batch_size.max(1)) {
        let clouds: Vec<&DenseTensor> = chunk.iter().map(|&i| data.cloud(i)).collect();
        let labels: Vec<usize> = chunk.iter().map(|&i| data.label(i)).collect();
        let b = GraphBatch::new(&clouds, &labels, model.spec().points)?;
        let logits = model.predict(&b)?;
        rows.extend((0..logits.rows()).map(|r| logits.row(r).to_vec()));
    }
    if rows.is_empty() {
        return DenseTensor::matrix(0, model.spec().classes, vec![]);
    }
    DenseTensor::from_rows(&rows)
}

/// Accuracy of eval-mode predictions on `split`.
pub fn evaluate(model: &Model, data: &PointCloudDataset, split: Split, batch_size: usize) -> Result<Evaluation> {
    let idx = data.indices(split);
    if idx.is_empty() {
        return Err(Error::Empty(format!("no {} samples", split.name())));
    }
    let logits = predict_indices(model, data, &idx, batch_size)?;
    let predictions: Vec<usize> = (0..logits.rows()).map(|r| argmax(logits.row(r))).collect();
    let correct = predictions.iter().zip(&idx).filter(|(p, &i)| **p == data.label(i)).count();
    Ok(Evaluation {
        accuracy: correct as f64 / idx.len() as f64,
        correct,
        predictions,
    })
}

fn augment(cloud: &DenseTensor, a: &Augment, rng: &mut ChaCha8Rng) -> DenseTensor {
    let scale: [f64; 3] = [0; 3].map(|_| rng.random_range(a.scale_low..=a.scale_high));
    let jitter = Normal::new(0.0, a.jitter_sigma).expect("validated sigma");
    let mut out = cloud.clone();
    for r in 0..out.rows() {
        for (v, s) in out.row_mut(r).iter_mut().zip(scale) {
            *v = *v * s + jitter.sample(rng).clamp(-a.jitter_clip, a.jitter_clip);
        }
    }
    out
}

/// Loss and gradients of one batch; returns the loss and the number of
/// correct training predictions.
fn train_batch(
    model: &mut Model,
    teacher: Option<&Model>,
    batch: &GraphBatch,
    cfg: &TrainConfig,
    state: &mut TrainState,
    lr: f64,
) -> Result<(f64, usize)> {
    let (out, tape, updates) = model.forward(batch, ForwardOptions::train(&mut state.rng))?;
    let labels = batch.labels();
    let teacher_out = match teacher {
        Some(t) => Some(t.forward(batch, ForwardOptions::eval())?.0),
        None => None,
    };
    let (mut loss, dlogits) = match (&teacher_out, cfg.distill.logit_matching) {
        (Some(t), Some(lm)) => {
            let (v, g) = logit_matching_loss(&out.logits, &t.logits, lm.temperature, lm.alpha, labels)?;
            (v.total, g)
        }
        _ => cross_entropy(&out.logits, labels)?,
    };
    let mut dfeatures: Vec<Option<DenseTensor>> = vec![None; out.features.len()];
    if let (Some(t), Some(lsp)) = (&teacher_out, cfg.distill.lsp) {
        if lsp.weight > 0.0 {
            // Transfer points: every graph built on learned features.
            for l in 0..out.features.len().saturating_sub(1).min(t.features.len().saturating_sub(1)) {
                let (v, mut g) = lsp_loss_grad(&out.features[l], &t.features[l], &out.graphs[l + 1], &t.graphs[l + 1], lsp.similarity)?;
                loss += lsp.weight * v;
                g.data_mut().iter_mut().for_each(|x| *x *= lsp.weight);
                dfeatures[l] = Some(g);
            }
        }
    }
    let grads = model.backward(tape.as_ref(), &dlogits, &dfeatures)?;
    adam_step(model, &grads, state, lr, cfg.decay())?;
    model.apply_bn_updates(&updates);
    // Parameters live in f32 storage.
    model.round_to_f32();
    let correct = (0..out.logits.rows()).filter(|&r| argmax(out.logits.row(r)) == labels[r]).count();
    Ok((loss, correct))
}

/// Trains `model` from `state.epoch` up to `cfg.epochs`, distilling from
/// `teacher` when the stage calls for one. Every metric line is passed to
/// `sink` as it is produced.
pub fn train(
    model: &mut Model,
    teacher: Option<&Model>,
    data: &PointCloudDataset,
    cfg: &TrainConfig,
    state: &mut TrainState,
    observer: &mut dyn TrainObserver,
) -> Result<TrainReport> {
    cfg.validate()?;
    state.check(model)?;
    if cfg.stage.needs_teacher() && teacher.is_none() {
        return Err(Error::MissingTeacher);
    }
    if data.classes() != model.spec().classes {
        return Err(Error::Shape(format!(
            "model has {} classes, dataset {}",
            model.spec().classes,
            data.classes()
        )));
    }
    model.set_stage(cfg.stage.model_stage());
    let train_idx = data.indices(Split::Train);
    if train_idx.len() < 2 {
        return Err(Error::Empty("training needs at least two training samples".into()));
    }
    let test_idx = data.indices(Split::Test);
    let mut report = TrainReport::default();
    let emit = |r: MetricRecord, report: &mut TrainReport, observer: &mut dyn TrainObserver| {
        observer.metric(&r);
        report.history.push(r);
    };
    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let lr = cfg.lr_schedule.lr(cfg.lr, epoch);
        let mut order = train_idx.clone();
        order.shuffle(&mut state.rng);
        let (mut loss_sum, mut correct, mut seen, mut batches) = (0.0, 0, 0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            // Batch statistics need at least two graphs.
            if chunk.len() < 2 {
                continue;
            }
            let clouds: Vec<DenseTensor> = chunk
                .iter()
                .map(|&i| match &cfg.augment {
                    Some(a) => augment(data.cloud(i), a, &mut state.rng),
                    None => data.cloud(i).clone(),
                })
                .collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| data.label(i)).collect();
            let batch = GraphBatch::new(&clouds.iter().collect::<Vec<_>>(), &labels, model.spec().points)?;
            let (l, c) = train_batch(model, teacher, &batch, cfg, state, lr)?;
            if !l.is_finite() {
                return Err(Error::NonFinite { index: epoch, value: l });
            }
            loss_sum += l;
            correct += c;
            seen += chunk.len();
            batches += 1;
        }
        state.epoch += 1;
        let train_acc = correct as f64 / seen.max(1) as f64;
        emit(MetricRecord { epoch, split: "train", metric: "lr", value: lr }, &mut report, observer);
        emit(MetricRecord { epoch, split: "train", metric: "loss", value: loss_sum / batches.max(1) as f64 }, &mut report, observer);
        emit(MetricRecord { epoch, split: "train", metric: "accuracy", value: train_acc }, &mut report, observer);
        report.final_train_accuracy = Some(train_acc);
        if !test_idx.is_empty() {
            let e = evaluate(model, data, Split::Test, cfg.batch_size.max(16))?;
            emit(MetricRecord { epoch, split: "test", metric: "accuracy", value: e.accuracy }, &mut report, observer);
            report.final_test_accuracy = Some(e.accuracy);
        }
        observer.epoch_end(model, state)?;
    }
    Ok(report)
}
