//! Masked-token pretraining with a prediction head tied to the token
//! embedding table.

use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{backward, forward_chunk, EncoderParams, TokenSequence, CHUNK_SIZE};
use crate::augment::draw_mask;
use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MlmConfig {
    pub epochs: usize,
    pub mask_prob: f64,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl Default for MlmConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            mask_prob: 0.15,
            batch_size: 32,
            optimizer: AdamWConfig::new(1e-3, 0.01),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlmReport {
    /// Mean cross-entropy over masked positions, per epoch.
    pub epoch_losses: Vec<f64>,
}

/// One masked input with the original ids at its masked positions.
#[derive(Debug, Clone, PartialEq)]
pub struct MlmExample {
    pub input: TokenSequence,
    pub original: Vec<u32>,
    pub masked: Vec<bool>,
}

impl MlmExample {
    pub fn new(original: &TokenSequence, masked: Vec<bool>) -> Self {
        let masked: Vec<bool> = masked
            .iter()
            .zip(original.special_mask())
            .map(|(&m, &s)| m && !s)
            .collect();
        Self {
            input: original.with_masked(&masked),
            original: original.ids().to_vec(),
            masked,
        }
    }
}

/// Summed loss, masked-position count and (optionally) the gradient of the
/// summed loss for one chunk.
fn chunk_loss(
    params: &EncoderParams,
    batch: &[&MlmExample],
    want_grad: bool,
) -> Result<(f64, usize, Option<EncoderParams>)> {
    let inputs: Vec<&[u32]> = batch.iter().map(|e| e.input.ids()).collect();
    let (hidden, cache) = forward_chunk(params, &inputs)?;
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (example, &(start, _)) in batch.iter().zip(cache.segments()) {
        for (p, &m) in example.masked.iter().enumerate() {
            if m {
                rows.push(start + p);
                targets.push(example.original[p] as usize);
            }
        }
    }
    if rows.is_empty() {
        let grad = want_grad.then(|| EncoderParams::zeros(params.config));
        return Ok((0.0, 0, grad));
    }
    let picked = hidden.select(Axis(0), &rows);
    let mut logits = picked.dot(&params.token_embedding.t());
    logits += &params.mlm_bias;
    let mut loss = 0.0;
    for (mut row, &target) in logits.rows_mut().into_iter().zip(&targets) {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
        loss -= row[target].max(1e-12).ln();
        row[target] -= 1.0;
    }
    if !want_grad {
        return Ok((loss, rows.len(), None));
    }
    // `logits` now holds dL/dlogits = p - onehot.
    let dlogits = logits;
    let mut grads = EncoderParams::zeros(params.config);
    grads.token_embedding += &dlogits.t().dot(&picked);
    grads.mlm_bias += &dlogits.sum_axis(Axis(0));
    let d_picked = dlogits.dot(&params.token_embedding);
    let mut d_hidden = Array2::zeros(hidden.raw_dim());
    for (i, &r) in rows.iter().enumerate() {
        d_hidden.row_mut(r).assign(&d_picked.row(i));
    }
    backward(params, &cache, &d_hidden, &mut grads);
    Ok((loss, rows.len(), Some(grads)))
}

fn batch_loss(
    params: &EncoderParams,
    batch: &[MlmExample],
    want_grad: bool,
) -> Result<(f64, usize, Option<EncoderParams>)> {
    let refs: Vec<&MlmExample> = batch.iter().collect();
    let parts: Vec<_> = refs
        .par_chunks(CHUNK_SIZE)
        .map(|chunk| chunk_loss(params, chunk, want_grad))
        .collect::<Result<_>>()?;
    let mut loss = 0.0;
    let mut count = 0;
    let mut grads = want_grad.then(|| EncoderParams::zeros(params.config));
    // Fixed-order reduction keeps results independent of the thread count.
    for (l, c, g) in parts {
        loss += l;
        count += c;
        if let (Some(total), Some(g)) = (grads.as_mut(), g) {
            total.accumulate(&g);
        }
    }
    Ok((loss, count, grads))
}

/// Mean cross-entropy over all masked positions in `batch` and its gradient
/// with respect to every encoder parameter. Unmasked positions contribute
/// nothing; a batch without masked positions has loss 0 and zero gradient.
pub fn mlm_loss_and_grad(params: &EncoderParams, batch: &[MlmExample]) -> Result<(f64, EncoderParams)> {
    let (loss, count, grads) = batch_loss(params, batch, true)?;
    let mut grads = grads.expect("gradient requested");
    if count == 0 {
        return Ok((0.0, grads));
    }
    let scale = 1.0 / count as f64;
    for t in grads.tensors_mut() {
        t.iter_mut().for_each(|v| *v *= scale);
    }
    Ok((loss * scale, grads))
}

/// Trains θ_m on the masked-token objective. Masks are redrawn every epoch
/// from a stream keyed by (seed, epoch, instance index).
pub fn pretrain_mlm(
    corpus: &[TokenSequence],
    mut params: EncoderParams,
    config: &MlmConfig,
) -> Result<(EncoderParams, MlmReport)> {
    let mut report = MlmReport {
        epoch_losses: Vec::with_capacity(config.epochs),
    };
    if config.epochs == 0 {
        return Ok((params, report));
    }
    if corpus.is_empty() {
        return Err(Error::Empty("masked-token pretraining corpus".into()));
    }
    if !(0.0..=1.0).contains(&config.mask_prob) || config.batch_size == 0 {
        return Err(Error::Config(
            "mlm: mask_prob must lie in [0,1] and batch_size must be positive".into(),
        ));
    }
    params.validate()?;
    let mut optimizer = AdamW::new(config.optimizer);
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        rand::seq::SliceRandom::shuffle(
            order.as_mut_slice(),
            &mut seed::rng_for(config.seed, &format!("mlm-shuffle-{epoch}")),
        );
        let mut epoch_loss = 0.0;
        let mut epoch_count = 0;
        for (b, batch_idx) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<MlmExample> = batch_idx
                .iter()
                .map(|&i| {
                    let mut rng = seed::rng_for(config.seed, &format!("mlm-mask-{epoch}-{i}"));
                    let seq = &corpus[i];
                    MlmExample::new(seq, draw_mask(seq.special_mask(), config.mask_prob, &mut rng))
                })
                .collect();
            let (loss, count, grads) = batch_loss(&params, &batch, true)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "masked-token loss at epoch {epoch}, batch {b}"
                )));
            }
            if count == 0 {
                continue;
            }
            let mut grads = grads.expect("gradient requested");
            let scale = 1.0 / count as f64;
            for t in grads.tensors_mut() {
                t.iter_mut().for_each(|v| *v *= scale);
            }
            let g: Vec<&[f64]> = grads.tensors().into_iter().map(|t| t.2).collect();
            optimizer.step(params.tensors_mut(), g);
            epoch_loss += loss;
            epoch_count += count;
        }
        let mean = if epoch_count == 0 {
            0.0
        } else {
            epoch_loss / epoch_count as f64
        };
        log::info!("mlm epoch {epoch}: loss {mean:.5}");
        report.epoch_losses.push(mean);
    }
    if report.epoch_losses.len() >= 3 && report.epoch_losses[2] > report.epoch_losses[0] {
        log::warn!(
            "mlm loss increased over the first epochs: {:?}",
            &report.epoch_losses[..3]
        );
    }
    params.validate()?;
    Ok((params, report))
}

/// Mean masked-token loss without a gradient, for evaluation.
pub fn mlm_loss(params: &EncoderParams, batch: &[MlmExample]) -> Result<f64> {
    let (loss, count, _) = batch_loss(params, batch, false)?;
    Ok(if count == 0 { 0.0 } else { loss / count as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{pack_sequence, EncoderConfig};
    use crate::seed::rng_for;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            vocab_size: 16,
            max_len: 8,
            hidden: 8,
            layers: 1,
            heads: 2,
            ffn: 16,
        }
    }

    fn examples() -> Vec<MlmExample> {
        let a = pack_sequence(&[5, 6], &[7, 8], 8).unwrap();
        let b = pack_sequence(&[9], &[10, 11, 12], 8).unwrap();
        vec![
            MlmExample::new(&a, vec![false, true, false, false, true, false]),
            MlmExample::new(&b, vec![false, false, false, true, false, true]),
        ]
    }

    #[test]
    fn unmasked_positions_do_not_contribute() {
        let params = EncoderParams::init(tiny(), &mut rng_for(1, "m")).unwrap();
        let seq = pack_sequence(&[5, 6], &[7, 8], 8).unwrap();
        let none = MlmExample::new(&seq, vec![false; 6]);
        let (loss, grads) = mlm_loss_and_grad(&params, &[none]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.tensors().iter().all(|t| t.2.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn specials_never_masked() {
        let seq = pack_sequence(&[5], &[7], 8).unwrap();
        let ex = MlmExample::new(&seq, vec![true; 4]);
        assert_eq!(ex.masked, vec![false, true, false, true]);
    }

    #[test]
    fn loss_matches_direct_computation() {
        let params = EncoderParams::init(tiny(), &mut rng_for(2, "m")).unwrap();
        let batch = examples();
        let (loss, _) = mlm_loss_and_grad(&params, &batch).unwrap();
        let mut total = 0.0;
        let mut count = 0;
        for ex in &batch {
            let out = crate::encoder::encode(&ex.input, &params).unwrap();
            for (p, &m) in ex.masked.iter().enumerate() {
                if !m {
                    continue;
                }
                let logits: Vec<f64> = (0..16)
                    .map(|v| out.hidden.row(p).dot(&params.token_embedding.row(v)) + params.mlm_bias[v])
                    .collect();
                let lse = logits.iter().map(|l| l.exp()).sum::<f64>().ln();
                total += lse - logits[ex.original[p] as usize];
                count += 1;
            }
        }
        assert!((loss - total / count as f64).abs() < 1e-10);
    }

    #[test]
    fn zero_epochs_is_identity() {
        let params = EncoderParams::init(tiny(), &mut rng_for(3, "m")).unwrap();
        let corpus = vec![pack_sequence(&[5], &[6], 8).unwrap()];
        let config = MlmConfig {
            epochs: 0,
            ..MlmConfig::default()
        };
        let (out, report) = pretrain_mlm(&corpus, params.clone(), &config).unwrap();
        assert_eq!(out, params);
        assert!(report.epoch_losses.is_empty());
    }

    #[test]
    fn empty_corpus_rejected() {
        let params = EncoderParams::init(tiny(), &mut rng_for(3, "m")).unwrap();
        assert!(pretrain_mlm(&[], params, &MlmConfig::default()).is_err());
    }
}
