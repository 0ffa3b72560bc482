//! Word tokenizer, sequence packing and a small pre-norm transformer encoder
//! with hand-written backpropagation.

mod forward;
mod mlm;
mod vocab;

use ndarray::{Array1, Array2};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::Rng;

pub use forward::{backward, check_ids, encode, encode_cls_batch, forward_chunk, ForwardCache, CHUNK_SIZE};
pub use mlm::{mlm_loss, mlm_loss_and_grad, pretrain_mlm, MlmConfig, MlmExample, MlmReport};
pub use vocab::{
    pack_sequence, split_words, tokenize, TokenSequence, Vocabulary, CLS, MASK, MASK_TOKEN, PAD, RESERVED, SEP, UNK,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
}

impl EncoderConfig {
    /// d = 64, two layers, two heads, 256 positions.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            max_len: 256,
            hidden: 64,
            layers: 2,
            heads: 2,
            ffn: 128,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("encoder: {m}")));
        if self.vocab_size <= RESERVED.len() {
            return fail("vocab_size must exceed the reserved block");
        }
        if self.max_len < 3 {
            return fail("max_len must be at least 3");
        }
        if self.hidden == 0 || self.heads == 0 || self.ffn == 0 {
            return fail("hidden, heads and ffn must be positive");
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return fail("hidden size must be divisible by the head count");
        }
        Ok(())
    }
}

/// One pre-norm transformer block. Linear weights are stored `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1_gain: Array1<f64>,
    pub ln1_bias: Array1<f64>,
    pub w_q: Array2<f64>,
    pub b_q: Array1<f64>,
    pub w_k: Array2<f64>,
    pub b_k: Array1<f64>,
    pub w_v: Array2<f64>,
    pub b_v: Array1<f64>,
    pub w_o: Array2<f64>,
    pub b_o: Array1<f64>,
    pub ln2_gain: Array1<f64>,
    pub ln2_bias: Array1<f64>,
    pub w_ff1: Array2<f64>,
    pub b_ff1: Array1<f64>,
    pub w_ff2: Array2<f64>,
    pub b_ff2: Array1<f64>,
}

impl BlockParams {
    fn zeros(config: &EncoderConfig) -> Self {
        let (d, f) = (config.hidden, config.ffn);
        Self {
            ln1_gain: Array1::zeros(d),
            ln1_bias: Array1::zeros(d),
            w_q: Array2::zeros((d, d)),
            b_q: Array1::zeros(d),
            w_k: Array2::zeros((d, d)),
            b_k: Array1::zeros(d),
            w_v: Array2::zeros((d, d)),
            b_v: Array1::zeros(d),
            w_o: Array2::zeros((d, d)),
            b_o: Array1::zeros(d),
            ln2_gain: Array1::zeros(d),
            ln2_bias: Array1::zeros(d),
            w_ff1: Array2::zeros((d, f)),
            b_ff1: Array1::zeros(f),
            w_ff2: Array2::zeros((f, d)),
            b_ff2: Array1::zeros(d),
        }
    }

    fn init(config: &EncoderConfig, rng: &mut Rng) -> Self {
        let mut block = Self::zeros(config);
        block.ln1_gain.fill(1.0);
        block.ln2_gain.fill(1.0);
        for w in [&mut block.w_q, &mut block.w_k, &mut block.w_v, &mut block.w_o] {
            fill_uniform(w, rng);
        }
        fill_uniform(&mut block.w_ff1, rng);
        fill_uniform(&mut block.w_ff2, rng);
        block
    }

    fn tensors(&self) -> Vec<(&'static str, &[usize], &[f64])> {
        macro_rules! t {
            ($($f:ident),*) => {
                vec![$((stringify!($f), self.$f.shape(), self.$f.as_slice().expect("standard layout"))),*]
            };
        }
        t!(ln1_gain, ln1_bias, w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o, ln2_gain, ln2_bias, w_ff1, b_ff1, w_ff2, b_ff2)
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        macro_rules! t {
            ($($f:ident),*) => {
                vec![$(self.$f.as_slice_mut().expect("standard layout")),*]
            };
        }
        t!(ln1_gain, ln1_bias, w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o, ln2_gain, ln2_bias, w_ff1, b_ff1, w_ff2, b_ff2)
    }
}

/// Encoder parameters: embeddings, blocks, final normalization and the bias
/// of the tied masked-token prediction head.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub token_embedding: Array2<f64>,
    pub position_embedding: Array2<f64>,
    pub blocks: Vec<BlockParams>,
    pub final_gain: Array1<f64>,
    pub final_bias: Array1<f64>,
    pub mlm_bias: Array1<f64>,
}

/// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for an `in x out` matrix.
fn fill_uniform(w: &mut Array2<f64>, rng: &mut Rng) {
    let bound = 1.0 / (w.nrows() as f64).sqrt();
    w.mapv_inplace(|_| rng.random_range(-bound..=bound));
}

const EMBEDDING_STD: f64 = 0.1;

impl EncoderParams {
    pub fn zeros(config: EncoderConfig) -> Self {
        let d = config.hidden;
        Self {
            config,
            token_embedding: Array2::zeros((config.vocab_size, d)),
            position_embedding: Array2::zeros((config.max_len, d)),
            blocks: (0..config.layers).map(|_| BlockParams::zeros(&config)).collect(),
            final_gain: Array1::zeros(d),
            final_bias: Array1::zeros(d),
            mlm_bias: Array1::zeros(config.vocab_size),
        }
    }

    pub fn init(config: EncoderConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut params = Self::zeros(config);
        let normal = Normal::new(0.0, EMBEDDING_STD).expect("valid std");
        params.token_embedding.mapv_inplace(|_| normal.sample(rng));
        params.position_embedding.mapv_inplace(|_| normal.sample(rng));
        params.blocks = (0..config.layers).map(|_| BlockParams::init(&config, rng)).collect();
        params.final_gain.fill(1.0);
        Ok(params)
    }

    /// Named tensors in a fixed order, with their shapes.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = vec![
            named("token_embedding", &self.token_embedding),
            named("position_embedding", &self.position_embedding),
        ];
        for (i, block) in self.blocks.iter().enumerate() {
            for (name, shape, data) in block.tensors() {
                out.push((format!("blocks.{i}.{name}"), shape.to_vec(), data));
            }
        }
        out.push(named("final_gain", &self.final_gain));
        out.push(named("final_bias", &self.final_bias));
        out.push(named("mlm_bias", &self.mlm_bias));
        out
    }

    /// Mutable views in the same order as [`EncoderParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![
            self.token_embedding.as_slice_mut().expect("standard layout"),
            self.position_embedding.as_slice_mut().expect("standard layout"),
        ];
        for block in &mut self.blocks {
            out.extend(block.tensors_mut());
        }
        out.push(self.final_gain.as_slice_mut().expect("standard layout"));
        out.push(self.final_bias.as_slice_mut().expect("standard layout"));
        out.push(self.mlm_bias.as_slice_mut().expect("standard layout"));
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, _, d)| d.len()).sum()
    }

    /// Adds `other` into `self` elementwise.
    pub fn accumulate(&mut self, other: &EncoderParams) {
        for (dst, (_, _, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (a, b) in dst.iter_mut().zip(src) {
                *a += b;
            }
        }
    }

    /// Checks that every tensor has the shape implied by `config` and holds
    /// only finite values.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.blocks.len() != self.config.layers {
            return Err(Error::Shape(format!(
                "{} blocks for {} layers",
                self.blocks.len(),
                self.config.layers
            )));
        }
        let reference = Self::zeros(self.config);
        for ((name, shape, data), (_, expected, _)) in self.tensors().into_iter().zip(reference.tensors()) {
            if shape != expected {
                return Err(Error::Shape(format!("{name}: {shape:?}, expected {expected:?}")));
            }
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("encoder tensor {name}")));
            }
        }
        Ok(())
    }
}

fn named<'a, D: ndarray::Dimension>(name: &str, a: &'a ndarray::Array<f64, D>) -> (String, Vec<usize>, &'a [f64]) {
    (
        name.to_string(),
        a.shape().to_vec(),
        a.as_slice().expect("standard layout"),
    )
}
