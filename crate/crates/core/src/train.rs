//! Losses, optimizers, the training loop and evaluation metrics.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{ModelCheckpoint, RngState};
use crate::config::Kv;
use crate::data::{augment, AugmentOptions, Dataset, PointCloud};
use crate::error::{Error, Result};
use crate::models::{argmax_rows, Head, Model};
use crate::param::Params;
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn sgd() -> Self {
        Optimizer::Sgd { momentum: 0.9 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    Constant,
    /// Half-cosine decay from the base rate towards zero over all epochs.
    Cosine,
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Schedule::Constant => "constant",
            Schedule::Cosine => "cosine",
        })
    }
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Schedule::Constant),
            "cosine" => Ok(Schedule::Cosine),
            _ => Err(Error::invalid(format!(
                "unknown schedule {s:?}; valid: constant, cosine"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
    pub schedule: Schedule,
    /// Evaluate every this many epochs (and after the last one).
    pub eval_every: usize,
    pub augment: AugmentOptions,
    /// Stop once the training-set score (OA, or mIoU for segmentation)
    /// reaches this value at an evaluation.
    pub stop_at: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 8,
            learning_rate: 1e-3,
            optimizer: Optimizer::adam(),
            seed: 1,
            schedule: Schedule::Cosine,
            eval_every: 1,
            augment: AugmentOptions::none(),
            stop_at: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::config("batch_size and eval_every must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        match self.optimizer {
            Optimizer::Sgd { momentum } if !(0.0..1.0).contains(&momentum) => {
                return Err(Error::config(format!("momentum {momentum} not in [0, 1)")))
            }
            Optimizer::Adam { beta1, beta2, eps }
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 =>
            {
                return Err(Error::config("Adam needs betas in [0, 1) and eps > 0"))
            }
            _ => {}
        }
        if self.augment.jitter_sigma < 0.0 {
            return Err(Error::config("jitter must be non-negative"));
        }
        if let Some((lo, hi)) = self.augment.scale_range {
            if !(lo > 0.0 && lo <= hi) {
                return Err(Error::config(format!("bad scale range {lo},{hi}")));
            }
        }
        Ok(())
    }

    /// Learning rate used during 0-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.learning_rate,
            Schedule::Cosine => {
                let t = epoch as f64 / self.epochs.max(1) as f64;
                0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }

    pub fn to_kv(&self) -> Kv {
        let mut kv = Kv::new();
        kv.set("train.epochs", self.epochs);
        kv.set("train.batch_size", self.batch_size);
        kv.set("train.lr", self.learning_rate);
        match self.optimizer {
            Optimizer::Sgd { momentum } => {
                kv.set("train.optimizer", "sgd");
                kv.set("train.momentum", momentum);
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                kv.set("train.optimizer", "adam");
                kv.set("train.beta1", beta1);
                kv.set("train.beta2", beta2);
                kv.set("train.eps", eps);
            }
        }
        kv.set("train.seed", self.seed);
        kv.set("train.schedule", self.schedule);
        kv.set("train.eval_every", self.eval_every);
        kv.set("train.rotate_z", self.augment.rotate_z);
        kv.set("train.jitter", self.augment.jitter_sigma);
        kv.set(
            "train.scale",
            match self.augment.scale_range {
                Some((lo, hi)) => format!("{lo},{hi}"),
                None => "none".into(),
            },
        );
        kv.set(
            "train.stop_at",
            self.stop_at
                .map_or_else(|| "none".to_string(), |v| v.to_string()),
        );
        kv
    }

    /// Reads `train.*` keys over the defaults.
    pub fn from_kv(kv: &Kv) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        if let Some(v) = kv.parse_opt("train.epochs")? {
            cfg.epochs = v;
        }
        if let Some(v) = kv.parse_opt("train.batch_size")? {
            cfg.batch_size = v;
        }
        if let Some(v) = kv.parse_opt("train.lr")? {
            cfg.learning_rate = v;
        }
        match kv.get("train.optimizer") {
            None | Some("adam") => {
                let mut opt = Optimizer::adam();
                if let Optimizer::Adam { beta1, beta2, eps } = &mut opt {
                    if let Some(v) = kv.parse_opt("train.beta1")? {
                        *beta1 = v;
                    }
                    if let Some(v) = kv.parse_opt("train.beta2")? {
                        *beta2 = v;
                    }
                    if let Some(v) = kv.parse_opt("train.eps")? {
                        *eps = v;
                    }
                }
                cfg.optimizer = opt;
            }
            Some("sgd") => {
                cfg.optimizer = Optimizer::Sgd {
                    momentum: kv.parse_opt("train.momentum")?.unwrap_or(0.9),
                }
            }
            Some(other) => {
                return Err(Error::config(format!(
                    "unknown optimizer {other:?}; valid: adam, sgd"
                )))
            }
        }
        if let Some(v) = kv.parse_opt("train.seed")? {
            cfg.seed = v;
        }
        if let Some(v) = kv.parse_opt("train.schedule")? {
            cfg.schedule = v;
        }
        if let Some(v) = kv.parse_opt("train.eval_every")? {
            cfg.eval_every = v;
        }
        if let Some(v) = kv.parse_opt("train.rotate_z")? {
            cfg.augment.rotate_z = v;
        }
        if let Some(v) = kv.parse_opt("train.jitter")? {
            cfg.augment.jitter_sigma = v;
        }
        match kv.get("train.scale") {
            None => {}
            Some("none") => cfg.augment.scale_range = None,
            Some(_) => match kv.parse_list::<f64>("train.scale")?.as_deref() {
                Some(&[lo, hi]) => cfg.augment.scale_range = Some((lo, hi)),
                _ => return Err(Error::config("train.scale must be lo,hi or none")),
            },
        }
        match kv.get("train.stop_at") {
            None | Some("none") => cfg.stop_at = None,
            Some(_) => cfg.stop_at = kv.parse_opt("train.stop_at")?,
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Mean cross-entropy of `M x C` logits against `labels`.
pub fn cross_entropy(tape: &Tape, logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    tape.cross_entropy(logits, labels)
}

/// Moment buffers and step count, in parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(params: &Params) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .entries()
            .iter()
            .map(|e| vec![0.0; e.value.len()])
            .collect();
        OptimizerState {
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }
}

/// One update of every parameter with learning rate `lr`.
///
/// SGD: `v = mu v + g; w -= lr v`. Adam uses bias-corrected moments:
/// `w -= lr m_hat / (sqrt(v_hat) + eps)`.
pub fn optimizer_step(
    params: &mut Params,
    grads: &[Vec<f64>],
    state: &mut OptimizerState,
    optimizer: Optimizer,
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.first.len() != params.len() {
        return Err(Error::invalid(format!(
            "{} gradients and {} state buffers for {} parameters",
            grads.len(),
            state.first.len(),
            params.len()
        )));
    }
    state.step += 1;
    for (p, g) in grads.iter().enumerate() {
        let id = crate::param::ParamId(p);
        let mut w = params.get(id).to_vec();
        if g.len() != w.len() {
            return Err(Error::shape(format!(
                "gradient of {} has {} values, parameter has {}",
                params.name(id),
                g.len(),
                w.len()
            )));
        }
        match optimizer {
            Optimizer::Sgd { momentum } => {
                let v = &mut state.first[p];
                for i in 0..w.len() {
                    v[i] = momentum * v[i] + g[i];
                    w[i] -= lr * v[i];
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let t = state.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                let (m, v) = (&mut state.first[p], &mut state.second[p]);
                for i in 0..w.len() {
                    m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                    v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                    let m_hat = m[i] / c1;
                    let v_hat = v[i] / c2;
                    w[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
        params.set(id, w)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    /// Overall accuracy: over clouds for classification, over points for
    /// segmentation.
    pub oa: f64,
    /// Mean accuracy over the labels present in the evaluated set.
    pub macc: f64,
    /// Mean per-shape IoU (segmentation only).
    pub miou: Option<f64>,
    pub loss: f64,
    /// Accuracy per label, `None` when the label does not occur.
    pub per_label_acc: Vec<Option<f64>>,
    /// Mean shape IoU per object class (segmentation only).
    pub per_class_miou: Vec<Option<f64>>,
}

/// Counts over predictions and ground truth.
fn accuracy(pred: &[usize], truth: &[usize], labels: usize) -> (f64, f64, Vec<Option<f64>>) {
    let mut hit = vec![0usize; labels];
    let mut total = vec![0usize; labels];
    for (&p, &t) in pred.iter().zip(truth) {
        total[t] += 1;
        if p == t {
            hit[t] += 1;
        }
    }
    let correct: usize = hit.iter().sum();
    let per: Vec<Option<f64>> = (0..labels)
        .map(|c| (total[c] > 0).then(|| hit[c] as f64 / total[c] as f64))
        .collect();
    let present: Vec<f64> = per.iter().flatten().copied().collect();
    let oa = correct as f64 / pred.len().max(1) as f64;
    let macc = present.iter().sum::<f64>() / present.len().max(1) as f64;
    (oa, macc, per)
}

/// IoU of one shape averaged over `parts`; a part absent from both the
/// prediction and the ground truth counts as 1.
pub fn shape_iou(pred: &[usize], truth: &[usize], parts: &[usize]) -> f64 {
    let mut sum = 0.0;
    for &part in parts {
        let mut inter = 0usize;
        let mut union = 0usize;
        for (&p, &t) in pred.iter().zip(truth) {
            let (a, b) = (p == part, t == part);
            inter += usize::from(a && b);
            union += usize::from(a || b);
        }
        sum += if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        };
    }
    sum / parts.len().max(1) as f64
}

fn class_label(cloud: &PointCloud, classes: usize) -> Result<usize> {
    match cloud.class_label {
        Some(l) if l < classes => Ok(l),
        Some(l) => Err(Error::invalid(format!(
            "{}: class label {l} but the model has {classes} outputs",
            cloud.source_id
        ))),
        None => Err(Error::invalid(format!(
            "{}: missing class label",
            cloud.source_id
        ))),
    }
}

fn part_labels(cloud: &PointCloud, parts: usize) -> Result<&[usize]> {
    let labels = cloud
        .part_labels
        .as_deref()
        .ok_or_else(|| Error::invalid(format!("{}: missing part labels", cloud.source_id)))?;
    if let Some(&bad) = labels.iter().find(|&&l| l >= parts) {
        return Err(Error::invalid(format!(
            "{}: part label {bad} but the model has {parts} outputs",
            cloud.source_id
        )));
    }
    Ok(labels)
}

/// Loss of one forward pass against the cloud's labels.
fn sample_loss(tape: &Tape, head: Head, logits: &Tensor, cloud: &PointCloud) -> Result<Tensor> {
    match head {
        Head::Classify(n) => cross_entropy(tape, logits, &[class_label(cloud, n)?]),
        Head::Segment(n) => cross_entropy(tape, logits, part_labels(cloud, n)?),
    }
}

/// Parts scored for a shape: its class's parts when the dataset lists
/// them, otherwise every label in its ground truth or prediction.
fn scored_parts(
    dataset: &Dataset,
    cloud: &PointCloud,
    pred: &[usize],
    truth: &[usize],
) -> Vec<usize> {
    if let Some(parts) = cloud.class_label.and_then(|c| dataset.class_parts.get(c)) {
        return parts.clone();
    }
    let mut all: Vec<usize> = pred.iter().chain(truth).copied().collect();
    all.sort_unstable();
    all.dedup();
    all
}

/// Per-cloud predictions: the class, or one part label per point.
pub fn predict(model: &Model, cloud: &PointCloud) -> Result<Vec<usize>> {
    Ok(argmax_rows(&model.infer(cloud)?.logits))
}

pub fn evaluate(model: &Model, dataset: &Dataset) -> Result<Metrics> {
    if dataset.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty dataset"));
    }
    let head = model.cfg.head;
    let mut loss = 0.0;
    let mut preds = Vec::new();
    let mut truth = Vec::new();
    let mut shape_ious = Vec::new();
    for cloud in &dataset.clouds {
        let tape = Tape::new();
        let logits = model.infer(cloud)?.logits;
        loss += sample_loss(&tape, head, &logits, cloud)?.item();
        let pred = argmax_rows(&logits);
        match head {
            Head::Classify(n) => truth.push(class_label(cloud, n)?),
            Head::Segment(n) => {
                let t = part_labels(cloud, n)?;
                let parts = scored_parts(dataset, cloud, &pred, t);
                shape_ious.push((cloud.class_label, shape_iou(&pred, t, &parts)));
                truth.extend_from_slice(t);
            }
        }
        preds.extend(pred);
    }
    let (oa, macc, per_label_acc) = accuracy(&preds, &truth, head.outputs());
    let (miou, per_class_miou) = match head {
        Head::Classify(_) => (None, Vec::new()),
        Head::Segment(_) => {
            let mean = shape_ious.iter().map(|s| s.1).sum::<f64>() / shape_ious.len() as f64;
            let per = (0..dataset.num_classes())
                .map(|c| {
                    let v: Vec<f64> = shape_ious
                        .iter()
                        .filter(|s| s.0 == Some(c))
                        .map(|s| s.1)
                        .collect();
                    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
                })
                .collect();
            (Some(mean), per)
        }
    };
    Ok(Metrics {
        oa,
        macc,
        miou,
        loss: loss / dataset.len() as f64,
        per_label_acc,
        per_class_miou,
    })
}

/// One line of the metrics history.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: String,
    pub oa: f64,
    pub macc: f64,
    pub miou: Option<f64>,
    pub loss: f64,
}

impl MetricsRow {
    pub fn new(epoch: usize, split: &str, m: &Metrics) -> Self {
        MetricsRow {
            epoch,
            split: split.to_string(),
            oa: m.oa,
            macc: m.macc,
            miou: m.miou,
            loss: m.loss,
        }
    }
}

pub const METRICS_HEADER: &str = "epoch,split,OA,mAcc,mIoU,loss";

/// CSV with a header; floats use the shortest exact representation and a
/// missing mIoU is written as `NA`.
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        let miou = r.miou.map_or_else(|| "NA".to_string(), |v| v.to_string());
        s.push_str(&format!(
            "{},{},{},{},{miou},{}\n",
            r.epoch, r.split, r.oa, r.macc, r.loss
        ));
    }
    s
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let bad = |line: usize, msg: &str| Error::Checkpoint(format!("metrics line {line}: {msg}"));
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(bad(1, "bad header"));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad(i + 2, "expected 6 fields"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(i + 2, "bad number"));
            Ok(MetricsRow {
                epoch: f[0].parse().map_err(|_| bad(i + 2, "bad epoch"))?,
                split: f[1].to_string(),
                oa: num(f[2])?,
                macc: num(f[3])?,
                miou: if f[4] == "NA" { None } else { Some(num(f[4])?) },
                loss: num(f[5])?,
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct FitOutput {
    pub checkpoint: ModelCheckpoint,
    pub history: Vec<MetricsRow>,
    /// Epochs actually run (fewer than configured after an early stop).
    pub epochs_run: usize,
}

fn score(m: &Metrics) -> f64 {
    m.miou.unwrap_or(m.oa)
}

fn record(
    model: &Model,
    train: &Dataset,
    eval: Option<&Dataset>,
    epoch: usize,
    history: &mut Vec<MetricsRow>,
) -> Result<Metrics> {
    let m = evaluate(model, train)?;
    history.push(MetricsRow::new(epoch, "train", &m));
    if let Some(ds) = eval.filter(|d| !d.is_empty()) {
        history.push(MetricsRow::new(epoch, "test", &evaluate(model, ds)?));
    }
    Ok(m)
}

/// Trains `model` in place. Each epoch shuffles the training set, and each
/// sample gets its own augmentation and forward seed, all drawn from one
/// generator seeded by `cfg.seed`. Gradients are averaged over the batch.
/// With `epochs == 0` the initial model is evaluated once.
pub fn fit(
    model: &mut Model,
    train: &Dataset,
    eval: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<FitOutput> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let head = model.cfg.head;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptimizerState::new(&model.params);
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs_run = 0;

    if cfg.epochs == 0 {
        record(model, train, eval, 0, &mut history)?;
    }
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Vec<Vec<f64>> = model
                .params
                .entries()
                .iter()
                .map(|e| vec![0.0; e.value.len()])
                .collect();
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let aug_seed: u64 = rng.gen();
                let forward_seed: u64 = rng.gen();
                let cloud = augment(&train.clouds[i], aug_seed, &cfg.augment);
                let tape = Tape::new();
                let bound = model.params.bind(&tape, true);
                let out = model.forward(&bound, &cloud, forward_seed)?;
                let loss = sample_loss(&tape, head, &out.logits, &cloud)?;
                if !loss.item().is_finite() {
                    return Err(Error::invalid(format!(
                        "non-finite loss at epoch {} on {}",
                        epoch + 1,
                        cloud.source_id
                    )));
                }
                let grads = tape.backward(&loss)?;
                for (a, t) in acc.iter_mut().zip(bound.tensors()) {
                    if let Some(g) = grads.get(t) {
                        for (x, y) in a.iter_mut().zip(g) {
                            *x += scale * y;
                        }
                    }
                }
            }
            optimizer_step(&mut model.params, &acc, &mut opt, cfg.optimizer, lr)?;
        }
        epochs_run = epoch + 1;
        let last = epochs_run == cfg.epochs;
        if epochs_run % cfg.eval_every == 0 || last {
            let m = record(model, train, eval, epochs_run, &mut history)?;
            if cfg.stop_at.is_some_and(|target| score(&m) >= target) {
                break;
            }
        }
    }
    let checkpoint = ModelCheckpoint {
        model: model.cfg.clone(),
        train: cfg.clone(),
        params: model.params.clone(),
        rng: RngState::capture(&rng),
        history: history.clone(),
    };
    Ok(FitOutput {
        checkpoint,
        history,
        epochs_run,
    })
}
