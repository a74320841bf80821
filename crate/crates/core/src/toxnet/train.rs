//! Class-weighted training of the fusion classifier with Adam and a
//! one-cycle schedule, keeping the best validation checkpoint.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::fusion::{batch_inputs, build_model, FusionConfig, FusionModel, Sample};
use crate::error::{Error, Result};
use crate::evalx::confusion_metrics;
use crate::nn::{onecycle_lr, softmax_rows, Adam, ForwardCtx, Graph, TrainSchedule};
use crate::rng::{self, Rng};

/// Inverse-frequency weights `[w_no, w_yes]`, scaled so the expected
/// per-sample weight is 1: `w_c = 1 / (2·freq_c)`.
pub fn class_weights(labels: &[bool]) -> Result<[f64; 2]> {
    let pos = labels.iter().filter(|&&y| y).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }
    let n = labels.len() as f64;
    Ok([n / (2.0 * neg as f64), n / (2.0 * pos as f64)])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub pct_start: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
    /// Share of the training patients held out, per class, for checkpoint
    /// selection.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch: 8,
            lr: 7e-4,
            pct_start: 0.3,
            div_factor: 25.0,
            final_div_factor: 1e4,
            val_fraction: 0.15,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    #[serde(rename = "val_bAcc")]
    pub val_bacc: Option<f64>,
    pub val_sens: Option<f64>,
    pub val_spec: Option<f64>,
}

pub fn write_history_csv(path: &Path, rows: &[HistoryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Csv(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Csv(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Per-class holdout of `fraction` (at least one of each class); empty when
/// a class has fewer than two members.
fn stratified_holdout(labels: &[bool], fraction: f64, rng: &mut Rng) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    let classes: Vec<Vec<usize>> = [true, false]
        .iter()
        .map(|&c| (0..labels.len()).filter(|&i| labels[i] == c).collect())
        .collect();
    if fraction <= 0.0 || classes.iter().any(|c| c.len() < 2) {
        return ((0..labels.len()).collect(), Vec::new());
    }
    for mut c in classes {
        c.shuffle(rng);
        let k = ((fraction * c.len() as f64).round() as usize).clamp(1, c.len() - 1);
        val.extend_from_slice(&c[..k]);
        train.extend_from_slice(&c[k..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Mini-batches over a shuffled order; a trailing batch of one joins the
/// previous batch so batch statistics stay defined.
fn batches(order: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(size).map(|c| c.to_vec()).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let tail = out.pop().unwrap();
        out.last_mut().unwrap().extend(tail);
    }
    out
}

/// Validation loss (class-weighted mean) and metrics of `model` on `idx`.
fn validate(model: &FusionModel, samples: &[Sample], idx: &[usize], weights: [f64; 2]) -> Result<(f64, crate::evalx::FoldMetrics)> {
    let refs: Vec<&Sample> = idx.iter().map(|&i| &samples[i]).collect();
    let probs = model.predict_proba(&refs)?;
    let labels: Vec<bool> = refs.iter().map(|s| s.label).collect();
    let loss = probs
        .iter()
        .zip(&labels)
        .map(|(p, &y)| -weights[y as usize] * p[y as usize].max(1e-12).ln())
        .sum::<f64>()
        / labels.len() as f64;
    let preds: Vec<bool> = probs.iter().map(|p| p[1] > p[0]).collect();
    Ok((loss, confusion_metrics(&preds, &labels)?))
}

/// Trains a model with `config` branches on `samples`. Class weights come
/// from the training labels. When both classes allow it, a stratified
/// holdout picks the checkpoint with the best validation bAcc (ties: lower
/// validation loss); otherwise the final epoch is kept.
pub fn train_classifier(
    config: &FusionConfig,
    samples: &[Sample],
    cfg: &ClassifierTrainConfig,
) -> Result<(FusionModel, Vec<HistoryRow>)> {
    if cfg.epochs == 0 || cfg.batch < 2 {
        return Err(Error::InvalidArgument("training needs epochs ≥ 1 and batch ≥ 2".into()));
    }
    let labels: Vec<bool> = samples.iter().map(|s| s.label).collect();
    class_weights(&labels)?;
    let mut r = rng::child(cfg.seed, 0x7A1);
    let (train, val) = stratified_holdout(&labels, cfg.val_fraction, &mut r);
    let train_labels: Vec<bool> = train.iter().map(|&i| labels[i]).collect();
    let weights = class_weights(&train_labels)?;
    let mut model = build_model(config, cfg.seed)?;
    let per_epoch = batches(&train, cfg.batch).len();
    let schedule = TrainSchedule {
        max_lr: cfg.lr,
        total_steps: cfg.epochs * per_epoch,
        pct_start: cfg.pct_start,
        div_factor: cfg.div_factor,
        final_div_factor: cfg.final_div_factor,
    };
    schedule.validate()?;
    let adam = Adam::default();
    let mut drop_rng = rng::child(cfg.seed, 0xD50);
    let mut order = train.clone();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<((f64, f64), crate::nn::ParamStore<f32>)> = None;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut r);
        let (mut loss_sum, mut count) = (0.0, 0usize);
        let mut lr = 0.0;
        for b in batches(&order, cfg.batch) {
            let refs: Vec<&Sample> = b.iter().map(|&i| &samples[i]).collect();
            let x = batch_inputs(config, &refs)?;
            let ys: Vec<usize> = refs.iter().map(|s| s.label as usize).collect();
            let mut g = Graph::<f32>::new();
            let mut ctx = ForwardCtx::train(&mut drop_rng);
            let logits = model.net.forward(&mut g, &model.store, &x, &mut ctx)?;
            let loss = g.weighted_cross_entropy(logits, &ys, &weights)?;
            let l = g.value(loss).item() as f64;
            if !l.is_finite() {
                return Err(Error::Diverged { iterations: step });
            }
            let grads = g.backward(loss)?.params(&model.store);
            ctx.apply_bn_updates(&mut model.store);
            lr = onecycle_lr(&schedule, step)?;
            adam.step(&mut model.store, &grads, lr);
            loss_sum += l * b.len() as f64;
            count += b.len();
            step += 1;
        }
        let mut row = HistoryRow {
            epoch: epoch + 1,
            loss: loss_sum / count as f64,
            lr,
            val_bacc: None,
            val_sens: None,
            val_spec: None,
        };
        if !val.is_empty() {
            let (vloss, m) = validate(&model, samples, &val, weights)?;
            row.val_bacc = Some(m.bacc);
            row.val_sens = Some(m.sensitivity);
            row.val_spec = Some(m.specificity);
            let key = (m.bacc, -vloss);
            if best.as_ref().is_none_or(|(k, _)| key > *k) {
                best = Some((key, model.store.clone()));
            }
        }
        history.push(row);
    }
    if let Some((_, store)) = best {
        model.store = store;
    }
    Ok((model, history))
}

/// Logits-free helper for callers holding raw outputs.
pub fn probabilities(logits: &[f32]) -> Vec<[f64; 2]> {
    softmax_rows(logits, 2).chunks(2).map(|r| [r[0] as f64, r[1] as f64]).collect()
}
