//! Finite-difference gradient checks shared by the integration and
//! acceptance targets.
#![allow(dead_code)]

use dualteach::classifier::{init_head, HeadParams, ModelParams, Role};
use dualteach::encoder::{
    mlm_loss, mlm_loss_and_grad, pack_sequence, EncoderConfig, EncoderParams, MlmExample, TokenSequence,
};
use dualteach::losses::LossWeights;
use dualteach::pipeline::batch_loss_and_grad;
use dualteach::seed::rng_for;
use rand::Rng as _;

pub const STEP: f64 = 1e-5;

/// Gradients smaller than `GRAD_FLOOR * max(1, |loss|)` are compared in
/// absolute terms. Central differences carry roundoff of about
/// `eps * |loss| / STEP`, roughly 2e-11 per unit of loss.
pub const GRAD_FLOOR: f64 = 1e-6;

pub fn tiny_config() -> EncoderConfig {
    EncoderConfig {
        vocab_size: 24,
        max_len: 16,
        hidden: 8,
        layers: 1,
        heads: 2,
        ffn: 16,
    }
}

pub fn random_sequences(config: &EncoderConfig, n: usize, seed: u64) -> Vec<TokenSequence> {
    let mut rng = rng_for(seed, "grad-seqs");
    (0..n)
        .map(|_| {
            let h = rng.random_range(1..5);
            let t = rng.random_range(1..5);
            let history: Vec<u32> = (0..h).map(|_| rng.random_range(5..config.vocab_size as u32)).collect();
            let target: Vec<u32> = (0..t).map(|_| rng.random_range(5..config.vocab_size as u32)).collect();
            pack_sequence(&history, &target, config.max_len).unwrap()
        })
        .collect()
}

fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_relative_error: f64,
    pub checked: usize,
    pub loss: f64,
}

impl GradCheck {
    fn new(loss: f64) -> Self {
        Self {
            max_relative_error: 0.0,
            checked: 0,
            loss,
        }
    }

    fn record(&mut self, analytic: f64, numeric: f64) {
        let floor = GRAD_FLOOR * self.loss.abs().max(1.0);
        self.max_relative_error = self.max_relative_error.max(relative_error(analytic, numeric, floor));
        self.checked += 1;
    }
}

/// Central differences over every encoder and head parameter of the combined
/// loss on a batch of four sequences.
pub fn check_combined_loss(weights: &LossWeights, seed: u64) -> GradCheck {
    let config = tiny_config();
    let encoder = EncoderParams::init(config, &mut rng_for(seed, "grad-encoder")).unwrap();
    let head = init_head(config.hidden, 3, &mut rng_for(seed, "grad-head")).unwrap();
    let model = ModelParams::teacher(Role::GoldTeacher, encoder, head).unwrap();
    let seqs = random_sequences(&config, 4, seed);
    let seq_refs: Vec<&TokenSequence> = seqs.iter().collect();
    // Two instances share a majority class so the contrastive term has positives.
    let targets: [&[f64]; 4] = [&[0.7, 0.2, 0.1], &[0.6, 0.3, 0.1], &[0.1, 0.8, 0.1], &[0.2, 0.2, 0.6]];
    let loss = |m: &ModelParams| batch_loss_and_grad(m, &seq_refs, &targets, weights).unwrap().0.total;
    let (breakdown, enc_grads, head_grads) = batch_loss_and_grad(&model, &seq_refs, &targets, weights).unwrap();

    let mut check = GradCheck::new(breakdown.total);
    let enc_analytic: Vec<Vec<f64>> = enc_grads.tensors().into_iter().map(|(_, _, d)| d.to_vec()).collect();
    for (t, analytic) in enc_analytic.iter().enumerate() {
        for (j, &a) in analytic.iter().enumerate() {
            let numeric = central_difference(&model, loss, |m| {
                &mut m.encoder.tensors_mut().into_iter().nth(t).unwrap()[j]
            });
            check.record(a, numeric);
        }
    }
    let head_analytic: Vec<Vec<f64>> = head_grads.tensors().into_iter().map(|(_, _, d)| d.to_vec()).collect();
    for (t, analytic) in head_analytic.iter().enumerate() {
        for (j, &a) in analytic.iter().enumerate() {
            let numeric = central_difference(&model, loss, |m| &mut head_tensor(&mut m.head, t)[j]);
            check.record(a, numeric);
        }
    }
    check
}

fn head_tensor(head: &mut HeadParams, t: usize) -> &mut [f64] {
    head.tensors_mut().into_iter().nth(t).unwrap()
}

fn central_difference<M: Clone>(base: &M, loss: impl Fn(&M) -> f64, slot: impl Fn(&mut M) -> &mut f64) -> f64 {
    let mut plus = base.clone();
    *slot(&mut plus) += STEP;
    let mut minus = base.clone();
    *slot(&mut minus) -= STEP;
    (loss(&plus) - loss(&minus)) / (2.0 * STEP)
}

/// Central differences over every encoder parameter of the masked-token loss
/// on six sequences.
pub fn check_mlm(seed: u64) -> GradCheck {
    let config = tiny_config();
    let params = EncoderParams::init(config, &mut rng_for(seed, "mlm-grad-encoder")).unwrap();
    let seqs = random_sequences(&config, 6, seed);
    let mut rng = rng_for(seed, "mlm-grad-mask");
    let batch: Vec<MlmExample> = seqs
        .iter()
        .map(|s| {
            let mut masked: Vec<bool> = (0..s.len()).map(|_| rng.random_bool(0.3)).collect();
            // At least one maskable position per sequence.
            let first = s.special_mask().iter().position(|sp| !sp).unwrap();
            masked[first] = true;
            MlmExample::new(s, masked)
        })
        .collect();
    let loss = |p: &EncoderParams| mlm_loss(p, &batch).unwrap();
    let (value, grads) = mlm_loss_and_grad(&params, &batch).unwrap();
    let mut check = GradCheck::new(value);
    let analytic: Vec<Vec<f64>> = grads.tensors().into_iter().map(|(_, _, d)| d.to_vec()).collect();
    for (t, values) in analytic.iter().enumerate() {
        for (j, &a) in values.iter().enumerate() {
            let numeric = central_difference(&params, loss, |p| &mut p.tensors_mut().into_iter().nth(t).unwrap()[j]);
            check.record(a, numeric);
        }
    }
    check
}
