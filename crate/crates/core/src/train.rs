//! Cross-entropy training with momentum SGD, validation tracking and
//! best-checkpoint retention; inference-time evaluation.

use std::fmt::Write as _;
use std::ops::ControlFlow;
use std::path::PathBuf;
use std::str::FromStr;

use crate::autodiff::{Backward, BackwardCtx, Graph, Var};
use crate::config::KeyValues;
use crate::data::{make_batches, AugmentationConfig, Batch, Subset};
use crate::error::{Error, Result};
use crate::metrics::{
    aggregate_report, average_precision, pr_curve, precision_recall, ConfusionMatrix,
    MetricsReport, PrCurve, ReportRow,
};
use crate::model::{save_checkpoint, Mode, Model, RUNNING_STATS_MOMENTUM};
use crate::taxonomy::{LesionClass, LesionGroup};
use crate::tensor::{softmax, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClassWeighting {
    None,
    /// `w_k = N / (K · n_k)` from training-set label counts.
    InverseFrequency,
}

impl ClassWeighting {
    pub fn as_str(self) -> &'static str {
        match self {
            ClassWeighting::None => "none",
            ClassWeighting::InverseFrequency => "inverse-frequency",
        }
    }
}

impl FromStr for ClassWeighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(ClassWeighting::None),
            "inverse-frequency" => Ok(ClassWeighting::InverseFrequency),
            other => Err(Error::Config(format!("unknown class weighting {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Written whenever validation loss improves.
    pub checkpoint: Option<PathBuf>,
    pub class_weighting: ClassWeighting,
    /// Applied to training batches only.
    pub augmentation: Option<AugmentationConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 16,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            checkpoint: None,
            class_weighting: ClassWeighting::InverseFrequency,
            augmentation: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if let Some(a) = &self.augmentation {
            a.validate()?;
        }
        Ok(())
    }

    pub fn write_key_values(&self, kv: &mut KeyValues) {
        kv.set("epochs", self.epochs);
        kv.set("batch_size", self.batch_size);
        kv.set("lr", self.learning_rate);
        kv.set("momentum", self.momentum);
        kv.set("weight_decay", self.weight_decay);
        kv.set("class_weighting", self.class_weighting.as_str());
        kv.set("augment", self.augmentation.is_some());
        if let Some(a) = &self.augmentation {
            a.write_key_values(kv);
        }
    }

    /// Reads training keys; `seed` and `checkpoint` are left for the caller.
    pub fn from_key_values(kv: &KeyValues, defaults: &TrainConfig) -> Result<Self> {
        let augment = kv.parse_or("augment", defaults.augmentation.is_some())?;
        let augmentation = if augment {
            let base = defaults.augmentation.unwrap_or_default();
            Some(AugmentationConfig::from_key_values(kv, &base)?)
        } else {
            None
        };
        let cfg = TrainConfig {
            epochs: kv.parse_or("epochs", defaults.epochs)?,
            batch_size: kv.parse_or("batch_size", defaults.batch_size)?,
            learning_rate: kv.parse_or("lr", defaults.learning_rate)?,
            momentum: kv.parse_or("momentum", defaults.momentum)?,
            weight_decay: kv.parse_or("weight_decay", defaults.weight_decay)?,
            seed: defaults.seed,
            checkpoint: defaults.checkpoint.clone(),
            class_weighting: match kv.get("class_weighting") {
                Some(s) => s.parse()?,
                None => defaults.class_weighting,
            },
            augmentation,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Per-class loss weights for `labels` over `k` classes. Absent classes get
/// weight 0 under inverse-frequency weighting.
pub fn class_weights(labels: &[usize], k: usize, weighting: ClassWeighting) -> Vec<f64> {
    match weighting {
        ClassWeighting::None => vec![1.0; k],
        ClassWeighting::InverseFrequency => {
            let mut counts = vec![0usize; k];
            for &l in labels {
                if l < k {
                    counts[l] += 1;
                }
            }
            let n = labels.len() as f64;
            counts
                .iter()
                .map(|&c| if c == 0 { 0.0 } else { n / (k * c) as f64 })
                .collect()
        }
    }
}

/// Per-row `lse(z) - z_y` plus the softmax, for `[B, K]` logits.
fn row_losses(logits: &Tensor, labels: &[usize]) -> Result<(Vec<f64>, Tensor)> {
    let &[b, k] = logits.shape() else {
        return Err(Error::Rank(format!("logits must be [B,K], got {:?}", logits.shape())));
    };
    if labels.len() != b {
        return Err(Error::Size(format!("{} labels for {b} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Index(format!("label {bad} outside 0..{k}")));
    }
    let z = logits.values();
    let losses = labels
        .iter()
        .enumerate()
        .map(|(r, &y)| {
            let row = &z[r * k..(r + 1) * k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            lse - row[y]
        })
        .collect();
    Ok((losses, softmax(logits, 1)?))
}

fn check_weights(weights: Option<&[f64]>, k: usize) -> Result<()> {
    match weights {
        Some(w) if w.len() != k => Err(Error::Size(format!("{} class weights for {k} classes", w.len()))),
        _ => Ok(()),
    }
}

/// Mean over the batch of `w_y · (−log softmax(z)_y)`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize], weights: Option<&[f64]>) -> Result<f64> {
    let (losses, _) = row_losses(logits, labels)?;
    check_weights(weights, logits.shape()[1])?;
    let w = |y: usize| weights.map_or(1.0, |w| w[y]);
    Ok(losses.iter().zip(labels).map(|(l, &y)| w(y) * l).sum::<f64>() / labels.len() as f64)
}

struct CrossEntropyRule {
    labels: Vec<usize>,
    weights: Vec<f64>,
    probs: Tensor,
}

impl Backward for CrossEntropyRule {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Vec<f64>> {
        let b = self.labels.len();
        let k = self.probs.shape()[1];
        let scale = ctx.grad[0] / b as f64;
        let mut gz = self.probs.values().to_vec();
        for (r, &y) in self.labels.iter().enumerate() {
            gz[r * k + y] -= 1.0;
            let w = self.weights[y] * scale;
            for v in &mut gz[r * k..(r + 1) * k] {
                *v *= w;
            }
        }
        vec![gz]
    }
}

impl Graph {
    /// Weighted mean cross-entropy of `[B, K]` logits, as a scalar node.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
        weights: Option<&[f64]>,
    ) -> Result<Var> {
        self.check(logits)?;
        let z = self.value(logits);
        let (losses, probs) = row_losses(z, labels)?;
        let k = z.shape()[1];
        check_weights(weights, k)?;
        let weights = weights.map_or_else(|| vec![1.0; k], <[f64]>::to_vec);
        let loss = losses.iter().zip(labels).map(|(l, &y)| weights[y] * l).sum::<f64>()
            / labels.len() as f64;
        Ok(self.record(
            "cross_entropy",
            &[logits],
            Tensor::scalar(loss),
            CrossEntropyRule {
                labels: labels.to_vec(),
                weights,
                probs,
            },
        ))
    }
}

/// Momentum buffers, one per parameter tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SgdState {
    velocity: Vec<Vec<f64>>,
}

impl SgdState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }
}

/// `v ← m·v + g + wd·p`, then `p ← p − lr·v`.
pub fn sgd_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut SgdState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Shape(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!(
                "parameter {i} is {:?} but its gradient is {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    if state.velocity.is_empty() {
        state.velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
    }
    if state.velocity.len() != params.len() {
        return Err(Error::Shape("optimizer state belongs to other parameters".into()));
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        for ((pv, gv), vv) in p.values_mut().iter_mut().zip(g.values()).zip(v.iter_mut()) {
            *vv = momentum * *vv + gv + weight_decay * *pv;
            *pv -= lr * *vv;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_precision_weighted: Option<f64>,
    pub val_recall_weighted: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    /// 1-based epoch whose weights were retained.
    pub best_epoch: usize,
}

impl TrainLog {
    /// CSV with header
    /// `epoch,train_loss,val_loss,val_precision_weighted,val_recall_weighted`;
    /// absent validation values are empty fields.
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("epoch,train_loss,val_loss,val_precision_weighted,val_recall_weighted\n");
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.8}")).unwrap_or_default();
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "{},{:.8},{},{},{}",
                e.epoch,
                e.train_loss,
                opt(e.val_loss),
                opt(e.val_precision_weighted),
                opt(e.val_recall_weighted)
            );
        }
        out
    }
}

pub struct FitOutcome {
    pub log: TrainLog,
    /// Weights from the epoch with the lowest validation loss (training loss
    /// when there is no validation set).
    pub best: Model,
}

/// Seed for epoch `epoch` derived from the run seed.
fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn divergence(epoch: usize, e: Error) -> Error {
    match e {
        Error::Degenerate(_) => Error::Divergence { epoch, loss: f64::NAN },
        other => other,
    }
}

/// Trains `model` in place and returns the log with the best weights.
pub fn fit(
    model: &mut Model,
    train: &Subset,
    val: Option<&Subset>,
    config: &TrainConfig,
) -> Result<FitOutcome> {
    fit_with(model, train, val, config, |_, _| ControlFlow::Continue(()))
}

/// [`fit`], calling `after_epoch` with each epoch's log entry and the current
/// weights. Returning `Break` ends training after that epoch.
pub fn fit_with<F>(
    model: &mut Model,
    train: &Subset,
    val: Option<&Subset>,
    config: &TrainConfig,
    mut after_epoch: F,
) -> Result<FitOutcome>
where
    F: FnMut(&EpochLog, &Model) -> ControlFlow<()>,
{
    config.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset("training subset has no samples".into()));
    }
    let k = model.num_classes();
    let weights = class_weights(&train.labels(), k, config.class_weighting);
    let val_batches = match val {
        Some(v) if !v.is_empty() => Some(make_batches(v, config.batch_size, None, None)?),
        _ => None,
    };
    let names: Vec<String> = (0..k).map(|c| format!("class{c}")).collect();
    let mut state = SgdState::new();
    let mut log = TrainLog::default();
    let mut best: Option<(f64, Model)> = None;

    for epoch in 1..=config.epochs {
        let seed = epoch_seed(config.seed, epoch);
        let augmentation = config.augmentation.map(|a| AugmentationConfig {
            seed: epoch_seed(a.seed, epoch),
            ..a
        });
        let batches = make_batches(train, config.batch_size, Some(seed), augmentation.as_ref())?;
        let mut total = 0.0;
        for batch in &batches {
            let mut g = Graph::new();
            let pass = model
                .forward(&mut g, &batch.images, Mode::Train)
                .map_err(|e| divergence(epoch, e))?;
            let loss = g.cross_entropy(pass.logits, &batch.labels, Some(&weights))?;
            let value = g.value(loss).values()[0];
            if !value.is_finite() {
                return Err(Error::Divergence { epoch, loss: value });
            }
            total += value * batch.len() as f64;
            let grads = g.backward(loss)?;
            let grads: Vec<Tensor> = pass.params.iter().map(|&p| grads.get(p)).collect();
            let mut params: Vec<&mut Tensor> =
                model.params_mut().iter_mut().map(|p| &mut p.tensor).collect();
            sgd_step(
                &mut params,
                &grads,
                &mut state,
                config.learning_rate,
                config.momentum,
                config.weight_decay,
            )?;
            model.update_running_stats(&pass.batch_stats, RUNNING_STATS_MOMENTUM);
        }
        let train_loss = total / train.len() as f64;

        let mut entry = EpochLog {
            epoch,
            train_loss,
            val_loss: None,
            val_precision_weighted: None,
            val_recall_weighted: None,
        };
        if let Some(vb) = &val_batches {
            let (loss, truth, pred) = inference_pass(model, vb, &weights)
                .map_err(|e| divergence(epoch, e))?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, loss });
            }
            let cm = ConfusionMatrix::from_indices(names.clone(), &truth, &pred)?;
            let (p, r) = weighted_precision_recall(&cm)?;
            entry.val_loss = Some(loss);
            entry.val_precision_weighted = Some(p);
            entry.val_recall_weighted = Some(r);
        }
        let criterion = entry.val_loss.unwrap_or(train_loss);
        log.epochs.push(entry);
        if best.as_ref().is_none_or(|(b, _)| criterion < *b) {
            let mut snapshot = model.clone();
            snapshot.meta.epoch = Some(epoch);
            snapshot.meta.seed = Some(config.seed);
            snapshot.meta.loss = Some(criterion);
            if let Some(path) = &config.checkpoint {
                save_checkpoint(&snapshot, path)?;
            }
            log.best_epoch = epoch;
            best = Some((criterion, snapshot));
        }
        if after_epoch(log.epochs.last().unwrap(), model).is_break() {
            break;
        }
    }
    let (_, best) = best.expect("at least one epoch ran");
    Ok(FitOutcome { log, best })
}

/// Weighted loss, labels and argmax predictions over `batches`.
fn inference_pass(
    model: &Model,
    batches: &[Batch],
    weights: &[f64],
) -> Result<(f64, Vec<usize>, Vec<usize>)> {
    let (mut total, mut n) = (0.0, 0);
    let (mut truth, mut pred) = (Vec::new(), Vec::new());
    for b in batches {
        let logits = model.logits(&b.images)?;
        total += cross_entropy(&logits, &b.labels, Some(weights))? * b.len() as f64;
        n += b.len();
        let k = logits.shape()[1];
        pred.extend(logits.values().chunks(k).map(argmax));
        truth.extend_from_slice(&b.labels);
    }
    Ok((total / n as f64, truth, pred))
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Support-weighted precision and recall of a confusion matrix.
pub fn weighted_precision_recall(cm: &ConfusionMatrix) -> Result<(f64, f64)> {
    let rows = (0..cm.num_classes())
        .map(|c| {
            let pr = precision_recall(cm, c);
            ReportRow {
                class: cm.classes()[c].clone(),
                support: cm.row_sum(c),
                precision: pr.precision,
                recall: pr.recall,
                ap: 0.0,
            }
        })
        .collect();
    let report = aggregate_report(rows)?;
    Ok((report.weighted.precision, report.weighted.recall))
}

/// Everything [`evaluate`] derives from one inference run.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub confusion: ConfusionMatrix,
    /// One curve per class with at least one positive sample.
    pub curves: Vec<PrCurve>,
    /// Per-sample class scores, in batch order.
    pub scores: Vec<Vec<f64>>,
    pub truth: Vec<usize>,
    pub predicted: Vec<usize>,
}

/// Runs inference and builds the metrics.
///
/// With `map3`, the model must use the seven lesion classes: labels and
/// argmax predictions are mapped to their lesion group and each group's score
/// is the summed probability of its member classes. Classes without positive
/// samples report AP 0 and get no curve.
pub fn evaluate(
    model: &Model,
    batches: &[Batch],
    class_list: &[String],
    map3: bool,
) -> Result<Evaluation> {
    if batches.iter().all(Batch::is_empty) {
        return Err(Error::EmptyDataset("nothing to evaluate".into()));
    }
    let k = model.num_classes();
    if class_list.len() != k {
        return Err(Error::Config(format!(
            "{} class names for a {k}-class model",
            class_list.len()
        )));
    }
    let (mut scores, mut truth, mut predicted) = (Vec::new(), Vec::new(), Vec::new());
    for b in batches {
        for (row, &label) in model.predict_batch(&b.images)?.into_iter().zip(&b.labels) {
            if label >= k {
                return Err(Error::Index(format!("label {label} outside 0..{k}")));
            }
            predicted.push(argmax(&row));
            truth.push(label);
            scores.push(row);
        }
    }
    let names = if map3 {
        let expected = LesionClass::names();
        if class_list != expected.as_slice() {
            return Err(Error::Config(
                "grouped evaluation needs the seven lesion classes in index order".into(),
            ));
        }
        let group = |c: usize| LesionClass::ALL[c].group().index();
        truth = truth.into_iter().map(group).collect();
        predicted = predicted.into_iter().map(group).collect();
        scores = scores
            .into_iter()
            .map(|row| {
                let mut g = vec![0.0; LesionGroup::ALL.len()];
                for (c, p) in row.into_iter().enumerate() {
                    g[group(c)] += p;
                }
                g
            })
            .collect();
        LesionGroup::names()
    } else {
        class_list.to_vec()
    };

    let confusion = ConfusionMatrix::from_indices(names.clone(), &truth, &predicted)?;
    let mut rows = Vec::with_capacity(names.len());
    let mut curves = Vec::new();
    for (c, name) in names.iter().enumerate() {
        let pr = precision_recall(&confusion, c);
        let class_scores: Vec<f64> = scores.iter().map(|s| s[c]).collect();
        let positive: Vec<bool> = truth.iter().map(|&t| t == c).collect();
        let ap = match pr_curve(name, &class_scores, &positive) {
            Ok(curve) => {
                let ap = average_precision(&curve);
                curves.push(curve);
                ap
            }
            Err(Error::UndefinedRecall(_)) => 0.0,
            Err(e) => return Err(e),
        };
        rows.push(ReportRow {
            class: name.clone(),
            support: confusion.row_sum(c),
            precision: pr.precision,
            recall: pr.recall,
            ap,
        });
    }
    Ok(Evaluation {
        report: aggregate_report(rows)?,
        confusion,
        curves,
        scores,
        truth,
        predicted,
    })
}
