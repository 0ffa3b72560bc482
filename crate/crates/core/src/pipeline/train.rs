//! Mini-batch training with AdamW and dev-best epoch retention.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{head_backward, head_forward, predict_batch, predict_features, HeadParams, ModelParams};
use crate::corpus::SoftLabel;
use crate::encoder::{backward, forward_chunk, EncoderParams, ForwardCache, TokenSequence, CHUNK_SIZE};
use crate::error::{Error, Result};
use crate::losses::{combined_loss, LossBreakdown, LossWeights};
use crate::metrics::{accuracy, macro_f1};
use crate::optim::{AdamW, AdamWConfig};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    #[default]
    Accuracy,
    MacroF1,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub selection: SelectionMetric,
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight decay must be nonnegative".into()));
        }
        Ok(())
    }

    fn optimizer(&self) -> AdamWConfig {
        AdamWConfig::new(self.learning_rate, self.weight_decay)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_accuracy: f64,
    pub dev_macro_f1: f64,
}

impl EpochRecord {
    fn score(&self, metric: SelectionMetric) -> f64 {
        match metric {
            SelectionMetric::Accuracy => self.dev_accuracy,
            SelectionMetric::MacroF1 => self.dev_macro_f1,
        }
    }
}

/// Index of the dev-best epoch; ties go to the earliest.
pub fn best_epoch(records: &[EpochRecord], metric: SelectionMetric) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, r) in records.iter().enumerate() {
        if best.is_none_or(|b| r.score(metric) > records[b].score(metric)) {
            best = Some(i);
        }
    }
    best
}

/// Token sequences with their labels.
#[derive(Debug, Clone, Copy)]
pub struct LabeledSeqs<'a> {
    pub seqs: &'a [TokenSequence],
    pub labels: &'a [SoftLabel],
}

impl<'a> LabeledSeqs<'a> {
    pub fn new(seqs: &'a [TokenSequence], labels: &'a [SoftLabel]) -> Result<Self> {
        if seqs.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} sequences for {} labels",
                seqs.len(),
                labels.len()
            )));
        }
        Ok(Self { seqs, labels })
    }
}

/// Loss and gradients of one batch with respect to every encoder and head
/// parameter.
pub fn batch_loss_and_grad(
    model: &ModelParams,
    seqs: &[&TokenSequence],
    targets: &[&[f64]],
    weights: &LossWeights,
) -> Result<(LossBreakdown, EncoderParams, HeadParams)> {
    let d = model.encoder.config.hidden;
    let forwards: Vec<(Array2<f64>, ForwardCache)> = seqs
        .par_chunks(CHUNK_SIZE)
        .map(|chunk| {
            let ids: Vec<&[u32]> = chunk.iter().map(|s| s.ids()).collect();
            forward_chunk(&model.encoder, &ids)
        })
        .collect::<Result<_>>()?;
    let mut cls = Array2::zeros((seqs.len(), d));
    let mut row = 0;
    for (out, cache) in &forwards {
        for &(start, _) in cache.segments() {
            cls.row_mut(row).assign(&out.row(start));
            row += 1;
        }
    }
    let head_cache = head_forward(&model.head, cls.view());
    let (breakdown, grads) = combined_loss(head_cache.logits.view(), targets, cls.view(), weights)?;
    let mut head_grads = HeadParams::zeros(d, model.num_classes());
    let mut d_cls = head_backward(&model.head, cls.view(), &head_cache, &grads.logits, &mut head_grads);
    d_cls += &grads.embeddings;

    let offsets: Vec<usize> = (0..forwards.len()).map(|c| c * CHUNK_SIZE).collect();
    let parts: Vec<EncoderParams> = forwards
        .par_iter()
        .zip(offsets.par_iter())
        .map(|((out, cache), &offset)| {
            let mut d_out = Array2::zeros(out.raw_dim());
            for (i, &(start, _)) in cache.segments().iter().enumerate() {
                d_out.row_mut(start).assign(&d_cls.row(offset + i));
            }
            let mut g = EncoderParams::zeros(model.encoder.config);
            backward(&model.encoder, cache, &d_out, &mut g);
            g
        })
        .collect();
    let mut encoder_grads = EncoderParams::zeros(model.encoder.config);
    for part in &parts {
        encoder_grads.accumulate(part);
    }
    Ok((breakdown, encoder_grads, head_grads))
}

/// Loss and head gradients of one batch on fixed `[CLS]` features.
pub fn head_loss_and_grad(
    head: &HeadParams,
    features: &Array2<f64>,
    targets: &[&[f64]],
    weights: &LossWeights,
) -> Result<(LossBreakdown, HeadParams)> {
    let cache = head_forward(head, features.view());
    let (breakdown, grads) = combined_loss(cache.logits.view(), targets, features.view(), weights)?;
    let mut head_grads = HeadParams::zeros(head.hidden(), head.num_classes());
    head_backward(head, features.view(), &cache, &grads.logits, &mut head_grads);
    Ok((breakdown, head_grads))
}

fn epoch_order(n: usize, shuffle_seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng_for(shuffle_seed, &format!("epoch-{epoch}")));
    order
}

fn dev_scores(preds: &[SoftLabel], golds: &[SoftLabel]) -> Result<(f64, f64)> {
    if golds.is_empty() {
        return Ok((0.0, 0.0));
    }
    Ok((accuracy(preds, golds)?, macro_f1(preds, golds)?))
}

fn check_loss(b: &LossBreakdown, epoch: usize, batch: usize) -> Result<()> {
    if b.total.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!(
            "training loss at epoch {epoch}, batch {batch}"
        )))
    }
}

/// Fine-tunes encoder and head together. Returns the parameters of the
/// dev-best epoch and one record per epoch. With an empty dev set every epoch
/// scores 0 and the first epoch is kept.
pub fn train_teacher(
    data: LabeledSeqs<'_>,
    model: ModelParams,
    config: &TrainingConfig,
    weights: &LossWeights,
    dev: LabeledSeqs<'_>,
    shuffle_seed: u64,
) -> Result<(ModelParams, Vec<EpochRecord>)> {
    if model.encoder_frozen() {
        return Err(Error::Config("cannot fine-tune a model with a frozen encoder".into()));
    }
    if config.epochs == 0 {
        return Ok((model, Vec::new()));
    }
    config.validate()?;
    weights.validate()?;
    if data.seqs.is_empty() {
        return Err(Error::Empty("teacher training data".into()));
    }
    let mut model = model;
    let mut optimizer = AdamW::new(config.optimizer());
    let mut records = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, ModelParams)> = None;
    for epoch in 0..config.epochs {
        let order = epoch_order(data.seqs.len(), shuffle_seed, epoch);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let seqs: Vec<&TokenSequence> = idx.iter().map(|&i| &data.seqs[i]).collect();
            let targets: Vec<&[f64]> = idx.iter().map(|&i| data.labels[i].probs()).collect();
            let (breakdown, enc_grads, head_grads) =
                batch_loss_and_grad(&model, &seqs, &targets, weights).map_err(|e| match e {
                    Error::NonFinite(_) => Error::NonFinite(format!("training loss at epoch {epoch}, batch {b}")),
                    other => other,
                })?;
            check_loss(&breakdown, epoch, b)?;
            let mut grads: Vec<&[f64]> = enc_grads.tensors().into_iter().map(|t| t.2).collect();
            grads.extend(head_grads.tensors().into_iter().map(|t| t.2));
            let mut params = model.encoder.tensors_mut();
            params.extend(model.head.tensors_mut());
            optimizer.step(params, grads);
            loss_sum += breakdown.total;
            batches += 1;
        }
        let preds: Vec<SoftLabel> = predict_batch(dev.seqs, &model)?.into_iter().map(|p| p.probs).collect();
        let (dev_accuracy, dev_macro_f1) = dev_scores(&preds, dev.labels)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            dev_accuracy,
            dev_macro_f1,
        };
        log::info!(
            "{} epoch {epoch}: loss {:.5}, dev accuracy {:.4}",
            model.role(),
            record.train_loss,
            record.dev_accuracy
        );
        let score = record.score(config.selection);
        if best.as_ref().is_none_or(|(s, _)| score > *s) {
            best = Some((score, model.clone()));
        }
        records.push(record);
    }
    let (_, best_model) = best.expect("at least one epoch");
    Ok((best_model, records))
}

/// Trains only the head on precomputed features; the encoder is untouched.
#[allow(clippy::too_many_arguments)]
pub fn train_head(
    features: &Array2<f64>,
    labels: &[SoftLabel],
    head: HeadParams,
    config: &TrainingConfig,
    weights: &LossWeights,
    dev_features: &Array2<f64>,
    dev_labels: &[SoftLabel],
    shuffle_seed: u64,
) -> Result<(HeadParams, Vec<EpochRecord>)> {
    if config.epochs == 0 {
        return Ok((head, Vec::new()));
    }
    config.validate()?;
    weights.validate()?;
    if labels.is_empty() {
        return Err(Error::Empty("student training data".into()));
    }
    if features.nrows() != labels.len() || dev_features.nrows() != dev_labels.len() {
        return Err(Error::Shape("features and labels are not aligned".into()));
    }
    let mut head = head;
    let mut optimizer = AdamW::new(config.optimizer());
    let mut records = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, HeadParams)> = None;
    for epoch in 0..config.epochs {
        let order = epoch_order(labels.len(), shuffle_seed, epoch);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let batch = features.select(Axis(0), idx);
            let targets: Vec<&[f64]> = idx.iter().map(|&i| labels[i].probs()).collect();
            let (breakdown, grads) = head_loss_and_grad(&head, &batch, &targets, weights)?;
            check_loss(&breakdown, epoch, b)?;
            let g: Vec<&[f64]> = grads.tensors().into_iter().map(|t| t.2).collect();
            optimizer.step(head.tensors_mut(), g);
            loss_sum += breakdown.total;
            batches += 1;
        }
        let preds: Vec<SoftLabel> = predict_features(&head, dev_features)?
            .into_iter()
            .map(|p| p.probs)
            .collect();
        let (dev_accuracy, dev_macro_f1) = dev_scores(&preds, dev_labels)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            dev_accuracy,
            dev_macro_f1,
        };
        log::debug!(
            "student epoch {epoch}: loss {:.5}, dev accuracy {:.4}",
            record.train_loss,
            dev_accuracy
        );
        let score = record.score(config.selection);
        if best.as_ref().is_none_or(|(s, _)| score > *s) {
            best = Some((score, head.clone()));
        }
        records.push(record);
    }
    let (_, best_head) = best.expect("at least one epoch");
    Ok((best_head, records))
}
