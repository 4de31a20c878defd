use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{adam_step, compute_metrics, cross_entropy, AdamConfig, AdamState, Confusion, EvalReport, LabeledItem, TrainError};
use crate::dsp::{FeatureNorm, NormMode, Segment, SpectrogramBatch};
use crate::model::{ModelConfig, SwinModel};
use crate::tensor::{Tape, Tensor};

/// How segment scores become test decisions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Vote {
    /// Every segment is scored on its own.
    #[default]
    Segment,
    /// Segment probabilities are averaged per clip before the argmax.
    Clip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub normalization: NormMode,
    pub vote: Vote,
    /// Batch size for inference passes.
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            epochs: 100,
            batch_size: 64,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            normalization: NormMode::Global,
            vote: Vote::Segment,
            eval_batch_size: 32,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(TrainError::Invalid("batch sizes must be positive".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(TrainError::Invalid("invalid optimizer settings".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// One line of the per-epoch log. Train-split figures are accumulated over
/// the epoch's minibatches while the weights move; test-split figures come
/// from a separate pass after the epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub fold: usize,
    pub split: Split,
    pub loss: f64,
    pub war: f64,
    pub uar: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedFold {
    pub model: SwinModel<f32>,
    pub normalization: Option<FeatureNorm>,
    pub log: Vec<EpochRecord>,
}

fn normalized(norm: Option<&FeatureNorm>, items: &[&LabeledItem]) -> Result<Vec<Segment>, TrainError> {
    items
        .iter()
        .map(|it| {
            let mut seg = it.features.clone();
            if let Some(n) = norm {
                n.apply(&mut seg)?;
            }
            Ok(seg)
        })
        .collect()
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn softmax_rows(logits: &Tensor<f32>) -> Vec<Vec<f64>> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mx = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
            let e: Vec<f64> = row.iter().map(|&v| (v as f64 - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|v| v / z).collect()
        })
        .collect()
}

/// Trains a fresh model on `train`. When `monitor` is given, it is scored
/// after every epoch and logged under [`Split::Test`]; it never influences
/// the weights. Shuffling is seeded by `(seed, fold, epoch)`.
#[allow(clippy::too_many_arguments)]
pub fn train_fold(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    classes: usize,
    train: &[&LabeledItem],
    monitor: Option<&[&LabeledItem]>,
    seed: u64,
    fold: usize,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainedFold, TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::Invalid("training set is empty".into()));
    }
    if model_cfg.num_classes != classes {
        return Err(TrainError::Invalid(format!(
            "model has {} classes, dataset has {classes}",
            model_cfg.num_classes
        )));
    }
    let norm = FeatureNorm::fit(cfg.normalization, train.iter().map(|it| &it.features))?;
    let segments = normalized(norm.as_ref(), train)?;
    let mut model = SwinModel::<f32>::new(model_cfg.clone(), seed)?;
    let mut adam = AdamState::new(cfg.adam(), model.params());
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(((fold as u64) << 32) | epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut confusion = Confusion::new(classes);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = SpectrogramBatch::from_segments(chunk.iter().map(|&i| &segments[i]))?;
            let labels: Vec<usize> = chunk.iter().map(|&i| train[i].label).collect();
            let tape = Tape::new();
            let bound = model.params().bind(&tape, true)?;
            let x = tape.constant(batch.to_tensor())?;
            let out = model.forward(&tape, &bound, x)?;
            let loss = cross_entropy(&tape, out.logits, &labels)?;
            let loss_value = tape.value(loss).item() as f64;
            if !loss_value.is_finite() {
                return Err(TrainError::Diverged { epoch });
            }
            loss_sum += loss_value * chunk.len() as f64;
            for (row, &z) in softmax_rows(&tape.value(out.logits)).iter().zip(&labels) {
                confusion.record(z, argmax(row));
            }
            let grads = bound.gradients(&tape.backward(loss)?);
            let mut params = model.params().clone();
            adam_step(&mut params, &grads, &mut adam)?;
            model.set_params(params)?;
        }
        let report = compute_metrics(&confusion)?;
        let rec = EpochRecord {
            epoch,
            fold,
            split: Split::Train,
            loss: loss_sum / train.len() as f64,
            war: report.war,
            uar: report.uar,
        };
        on_epoch(&rec);
        log.push(rec);

        if let Some(test) = monitor.filter(|t| !t.is_empty()) {
            let scored = score(&model, norm.as_ref(), test, cfg.eval_batch_size)?;
            let loss = scored
                .iter()
                .zip(test)
                .map(|(p, it)| -p[it.label].max(f64::MIN_POSITIVE).ln())
                .sum::<f64>()
                / test.len() as f64;
            let report = compute_metrics(&vote(&scored, test, classes, cfg.vote))?;
            let rec = EpochRecord {
                epoch,
                fold,
                split: Split::Test,
                loss,
                war: report.war,
                uar: report.uar,
            };
            on_epoch(&rec);
            log.push(rec);
        }
    }
    Ok(TrainedFold {
        model,
        normalization: norm,
        log,
    })
}

/// Class probabilities for every item, in order.
pub fn score(
    model: &SwinModel<f32>,
    norm: Option<&FeatureNorm>,
    items: &[&LabeledItem],
    batch_size: usize,
) -> Result<Vec<Vec<f64>>, TrainError> {
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(batch_size.max(1)) {
        let segs = normalized(norm, chunk)?;
        let batch = SpectrogramBatch::from_segments(&segs)?;
        out.extend(softmax_rows(&model.logits(&batch)?));
    }
    Ok(out)
}

/// Builds the confusion matrix from per-segment probabilities. In clip mode
/// the probabilities of each clip's segments are averaged first.
pub fn vote(probs: &[Vec<f64>], items: &[&LabeledItem], classes: usize, mode: Vote) -> Confusion {
    let mut confusion = Confusion::new(classes);
    match mode {
        Vote::Segment => {
            for (p, it) in probs.iter().zip(items) {
                confusion.record(it.label, argmax(p));
            }
        }
        Vote::Clip => {
            let mut clips: BTreeMap<u32, (usize, Vec<f64>, usize)> = BTreeMap::new();
            for (p, it) in probs.iter().zip(items) {
                let entry = clips.entry(it.clip).or_insert_with(|| (it.label, vec![0.0; p.len()], 0));
                for (acc, v) in entry.1.iter_mut().zip(p) {
                    *acc += v;
                }
                entry.2 += 1;
            }
            for (label, sum, n) in clips.into_values() {
                let mean: Vec<f64> = sum.iter().map(|v| v / n as f64).collect();
                confusion.record(label, argmax(&mean));
            }
        }
    }
    confusion
}

pub fn evaluate(
    model: &SwinModel<f32>,
    norm: Option<&FeatureNorm>,
    items: &[&LabeledItem],
    mode: Vote,
    batch_size: usize,
) -> Result<EvalReport, TrainError> {
    if items.is_empty() {
        return Err(TrainError::Invalid("test set is empty".into()));
    }
    let classes = model.config().num_classes;
    if let Some(bad) = items.iter().find(|it| it.label >= classes) {
        return Err(TrainError::Label {
            label: bad.label,
            classes,
        });
    }
    let probs = score(model, norm, items, batch_size)?;
    compute_metrics(&vote(&probs, items, classes, mode))
}
