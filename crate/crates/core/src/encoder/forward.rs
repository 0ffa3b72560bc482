//! Forward pass over a chunk of variable-length sequences and the matching
//! reverse-mode gradient.
//!
//! Sequences in a chunk are stacked row-wise into one `T x d` matrix so that
//! every linear layer is a single matrix product; attention runs per sequence.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, Axis, Zip};
use rayon::prelude::*;

use super::{BlockParams, EncoderConfig, EncoderParams, TokenSequence};
use crate::error::{Error, Result};

/// Sequences per forward chunk. Fixed so that parallel work is split the same
/// way regardless of the worker count.
pub const CHUNK_SIZE: usize = 8;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

struct LnCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

struct BlockCache {
    ln1: LnCache,
    a: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Attention weights, indexed `segment * heads + head`.
    probs: Vec<Array2<f64>>,
    concat: Array2<f64>,
    ln2: LnCache,
    b: Array2<f64>,
    u: Array2<f64>,
    g: Array2<f64>,
}

/// Intermediate values kept for [`backward`].
pub struct ForwardCache {
    ids: Vec<u32>,
    positions: Vec<usize>,
    segments: Vec<(usize, usize)>,
    blocks: Vec<BlockCache>,
    final_ln: LnCache,
}

impl ForwardCache {
    /// `(first row, length)` of each sequence in the stacked matrix.
    pub fn segments(&self) -> &[(usize, usize)] {
        &self.segments
    }
}

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + GELU_A * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + GELU_A * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * u * u)
}

fn layer_norm(x: &Array2<f64>, gain: &Array1<f64>, bias: &Array1<f64>) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row -= mean;
        let var = row.dot(&row) / d;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        row *= inv;
        *r = inv;
    }
    let y = &xhat * gain + bias;
    (y, LnCache { xhat, rstd })
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    gain: &Array1<f64>,
    dgain: &mut Array1<f64>,
    dbias: &mut Array1<f64>,
) -> Array2<f64> {
    *dgain += &(dy * &cache.xhat).sum_axis(Axis(0));
    *dbias += &dy.sum_axis(Axis(0));
    let d = dy.ncols() as f64;
    let mut dx = dy * gain;
    for ((mut row, xhat), &rstd) in dx.rows_mut().into_iter().zip(cache.xhat.rows()).zip(&cache.rstd) {
        let mean_g = row.sum() / d;
        let mean_gx = row.dot(&xhat) / d;
        Zip::from(&mut row)
            .and(&xhat)
            .for_each(|g, &xh| *g = rstd * (*g - mean_g - xh * mean_gx));
    }
    dx
}

fn linear(x: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut y = x.dot(w);
    y += b;
    y
}

fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

fn attention_forward(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    segments: &[(usize, usize)],
    heads: usize,
) -> (Array2<f64>, Vec<Array2<f64>>) {
    let dh = q.ncols() / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut concat = Array2::zeros(q.raw_dim());
    let mut probs = Vec::with_capacity(segments.len() * heads);
    for &(start, len) in segments {
        let rows = start..start + len;
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let qs = q.slice(s![rows.clone(), cols.clone()]);
            let ks = k.slice(s![rows.clone(), cols.clone()]);
            let vs = v.slice(s![rows.clone(), cols.clone()]);
            let mut p = qs.dot(&ks.t());
            p *= scale;
            softmax_rows(&mut p);
            concat.slice_mut(s![rows.clone(), cols]).assign(&p.dot(&vs));
            probs.push(p);
        }
    }
    (concat, probs)
}

fn attention_backward(
    dconcat: &Array2<f64>,
    cache: &BlockCache,
    segments: &[(usize, usize)],
    heads: usize,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let (q, k, v) = (&cache.q, &cache.k, &cache.v);
    let dh = q.ncols() / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Array2::zeros(q.raw_dim());
    let mut dk = Array2::zeros(q.raw_dim());
    let mut dv = Array2::zeros(q.raw_dim());
    let mut probs = cache.probs.iter();
    for &(start, len) in segments {
        let rows = start..start + len;
        for h in 0..heads {
            let p = probs.next().expect("one attention map per segment and head");
            let cols = h * dh..(h + 1) * dh;
            let qs = q.slice(s![rows.clone(), cols.clone()]);
            let ks = k.slice(s![rows.clone(), cols.clone()]);
            let vs = v.slice(s![rows.clone(), cols.clone()]);
            let d_out = dconcat.slice(s![rows.clone(), cols.clone()]);
            dv.slice_mut(s![rows.clone(), cols.clone()]).assign(&p.t().dot(&d_out));
            let mut ds = d_out.dot(&vs.t());
            for (mut row, p_row) in ds.rows_mut().into_iter().zip(p.rows()) {
                let dot = row.dot(&p_row);
                Zip::from(&mut row)
                    .and(&p_row)
                    .for_each(|g, &pv| *g = pv * (*g - dot) * scale);
            }
            dq.slice_mut(s![rows.clone(), cols.clone()]).assign(&ds.dot(&ks));
            dk.slice_mut(s![rows.clone(), cols]).assign(&ds.t().dot(&qs));
        }
    }
    (dq, dk, dv)
}

fn block_forward(
    block: &BlockParams,
    x: Array2<f64>,
    segments: &[(usize, usize)],
    heads: usize,
) -> (Array2<f64>, BlockCache) {
    let (a, ln1) = layer_norm(&x, &block.ln1_gain, &block.ln1_bias);
    let q = linear(&a, &block.w_q, &block.b_q);
    let k = linear(&a, &block.w_k, &block.b_k);
    let v = linear(&a, &block.w_v, &block.b_v);
    let (concat, probs) = attention_forward(&q, &k, &v, segments, heads);
    let x1 = x + linear(&concat, &block.w_o, &block.b_o);
    let (b, ln2) = layer_norm(&x1, &block.ln2_gain, &block.ln2_bias);
    let u = linear(&b, &block.w_ff1, &block.b_ff1);
    let g = u.mapv(gelu);
    let x2 = x1 + linear(&g, &block.w_ff2, &block.b_ff2);
    let cache = BlockCache {
        ln1,
        a,
        q,
        k,
        v,
        probs,
        concat,
        ln2,
        b,
        u,
        g,
    };
    (x2, cache)
}

fn block_backward(
    block: &BlockParams,
    cache: &BlockCache,
    dx: Array2<f64>,
    grads: &mut BlockParams,
    segments: &[(usize, usize)],
    heads: usize,
) -> Array2<f64> {
    general_mat_mul(1.0, &cache.g.t(), &dx, 1.0, &mut grads.w_ff2);
    grads.b_ff2 += &dx.sum_axis(Axis(0));
    let mut du = dx.dot(&block.w_ff2.t());
    Zip::from(&mut du).and(&cache.u).for_each(|d, &u| *d *= gelu_grad(u));
    general_mat_mul(1.0, &cache.b.t(), &du, 1.0, &mut grads.w_ff1);
    grads.b_ff1 += &du.sum_axis(Axis(0));
    let db = du.dot(&block.w_ff1.t());
    let mut dx1 = dx;
    dx1 += &layer_norm_backward(
        &db,
        &cache.ln2,
        &block.ln2_gain,
        &mut grads.ln2_gain,
        &mut grads.ln2_bias,
    );

    general_mat_mul(1.0, &cache.concat.t(), &dx1, 1.0, &mut grads.w_o);
    grads.b_o += &dx1.sum_axis(Axis(0));
    let dconcat = dx1.dot(&block.w_o.t());
    let (dq, dk, dv) = attention_backward(&dconcat, cache, segments, heads);

    general_mat_mul(1.0, &cache.a.t(), &dq, 1.0, &mut grads.w_q);
    general_mat_mul(1.0, &cache.a.t(), &dk, 1.0, &mut grads.w_k);
    general_mat_mul(1.0, &cache.a.t(), &dv, 1.0, &mut grads.w_v);
    grads.b_q += &dq.sum_axis(Axis(0));
    grads.b_k += &dk.sum_axis(Axis(0));
    grads.b_v += &dv.sum_axis(Axis(0));
    let mut da = dq.dot(&block.w_q.t());
    general_mat_mul(1.0, &dk, &block.w_k.t(), 1.0, &mut da);
    general_mat_mul(1.0, &dv, &block.w_v.t(), 1.0, &mut da);
    dx1 += &layer_norm_backward(
        &da,
        &cache.ln1,
        &block.ln1_gain,
        &mut grads.ln1_gain,
        &mut grads.ln1_bias,
    );
    dx1
}

/// Checks that a sequence can be encoded under `config`.
pub fn check_ids(config: &EncoderConfig, seq: &[u32]) -> Result<()> {
    if seq.is_empty() {
        return Err(Error::Sequence("cannot encode an empty sequence".into()));
    }
    if seq.len() > config.max_len {
        return Err(Error::Sequence(format!(
            "sequence of {} tokens exceeds max_len {}",
            seq.len(),
            config.max_len
        )));
    }
    if let Some(&id) = seq.iter().find(|&&id| id as usize >= config.vocab_size) {
        return Err(Error::TokenOutOfRange {
            id,
            vocab_size: config.vocab_size,
        });
    }
    Ok(())
}

/// Runs the encoder over a chunk of id sequences, returning the stacked final
/// hidden states (`sum(len) x d`) and the cache needed for [`backward`].
pub fn forward_chunk(params: &EncoderParams, seqs: &[&[u32]]) -> Result<(Array2<f64>, ForwardCache)> {
    let config = &params.config;
    let mut segments = Vec::with_capacity(seqs.len());
    let mut ids = Vec::new();
    let mut positions = Vec::new();
    for seq in seqs {
        check_ids(config, seq)?;
        segments.push((ids.len(), seq.len()));
        ids.extend_from_slice(seq);
        positions.extend(0..seq.len());
    }
    if params.token_embedding.dim() != (config.vocab_size, config.hidden)
        || params.position_embedding.dim() != (config.max_len, config.hidden)
        || params.blocks.len() != config.layers
    {
        return Err(Error::Shape("encoder parameters do not match their config".into()));
    }

    let mut x = Array2::zeros((ids.len(), config.hidden));
    for (t, mut row) in x.rows_mut().into_iter().enumerate() {
        row.assign(&params.token_embedding.row(ids[t] as usize));
        row += &params.position_embedding.row(positions[t]);
    }
    let mut blocks = Vec::with_capacity(params.blocks.len());
    for block in &params.blocks {
        let (next, cache) = block_forward(block, x, &segments, config.heads);
        x = next;
        blocks.push(cache);
    }
    let (out, final_ln) = layer_norm(&x, &params.final_gain, &params.final_bias);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("encoder output".into()));
    }
    Ok((
        out,
        ForwardCache {
            ids,
            positions,
            segments,
            blocks,
            final_ln,
        },
    ))
}

/// Accumulates the gradient of a scalar loss into `grads`, given the loss
/// gradient with respect to the stacked hidden states.
pub fn backward(params: &EncoderParams, cache: &ForwardCache, d_out: &Array2<f64>, grads: &mut EncoderParams) {
    let mut dx = layer_norm_backward(
        d_out,
        &cache.final_ln,
        &params.final_gain,
        &mut grads.final_gain,
        &mut grads.final_bias,
    );
    for (l, block) in params.blocks.iter().enumerate().rev() {
        dx = block_backward(
            block,
            &cache.blocks[l],
            dx,
            &mut grads.blocks[l],
            &cache.segments,
            params.config.heads,
        );
    }
    for (t, row) in dx.rows().into_iter().enumerate() {
        let mut tok = grads.token_embedding.row_mut(cache.ids[t] as usize);
        tok += &row;
        let mut pos = grads.position_embedding.row_mut(cache.positions[t]);
        pos += &row;
    }
}

/// Hidden states of one sequence; row 0 is the `[CLS]` representation.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub hidden: Array2<f64>,
}

impl EncoderOutput {
    pub fn cls(&self) -> ArrayView1<'_, f64> {
        self.hidden.row(0)
    }
}

pub fn encode(x: &TokenSequence, params: &EncoderParams) -> Result<EncoderOutput> {
    let (hidden, _) = forward_chunk(params, &[x.ids()])?;
    Ok(EncoderOutput { hidden })
}

/// `[CLS]` representations for many sequences (`N x d`), computed in fixed
/// chunks in parallel.
pub fn encode_cls_batch(params: &EncoderParams, seqs: &[&TokenSequence]) -> Result<Array2<f64>> {
    let d = params.config.hidden;
    for (i, seq) in seqs.iter().enumerate() {
        check_ids(&params.config, seq.ids()).map_err(|e| Error::at_index(i, e))?;
    }
    let chunks: Vec<Result<Array2<f64>>> = seqs
        .par_chunks(CHUNK_SIZE)
        .enumerate()
        .map(|(c, chunk)| {
            let ids: Vec<&[u32]> = chunk.iter().map(|s| s.ids()).collect();
            let (out, cache) = forward_chunk(params, &ids).map_err(|e| Error::at_index(c * CHUNK_SIZE, e))?;
            let mut cls = Array2::zeros((chunk.len(), d));
            for (i, &(start, _)) in cache.segments().iter().enumerate() {
                cls.row_mut(i).assign(&out.row(start));
            }
            Ok(cls)
        })
        .collect();
    let mut features = Array2::zeros((seqs.len(), d));
    for (c, chunk) in chunks.into_iter().enumerate() {
        let chunk = chunk?;
        let start = c * CHUNK_SIZE;
        features.slice_mut(s![start..start + chunk.nrows(), ..]).assign(&chunk);
    }
    Ok(features)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{pack_sequence, EncoderConfig};
    use crate::seed::rng_for;

    fn model(d: usize) -> EncoderParams {
        let config = EncoderConfig {
            vocab_size: 30,
            max_len: 16,
            hidden: d,
            layers: 2,
            heads: 2,
            ffn: 2 * d,
        };
        EncoderParams::init(config, &mut rng_for(3, "fwd")).unwrap()
    }

    #[test]
    fn output_shape_and_cls_row() {
        let params = model(64);
        let seq = pack_sequence(&[7, 8, 9], &[10, 11], 16).unwrap();
        let out = encode(&seq, &params).unwrap();
        assert_eq!(out.hidden.dim(), (7, 64));
        assert_eq!(out.cls().len(), 64);
        assert_eq!(out.cls(), out.hidden.row(0));
        assert_eq!(encode(&seq, &params).unwrap(), out);
    }

    #[test]
    fn positions_matter() {
        let params = model(16);
        let a = pack_sequence(&[7, 8, 9], &[10, 11], 16).unwrap();
        let b = pack_sequence(&[8, 7, 9], &[10, 11], 16).unwrap();
        let ea = encode(&a, &params).unwrap();
        let eb = encode(&b, &params).unwrap();
        assert_ne!(ea.hidden, eb.hidden);
        assert_ne!(ea.cls(), eb.cls());
    }

    #[test]
    fn masking_keeps_shape() {
        let params = model(16);
        let seq = pack_sequence(&[7, 8, 9], &[10, 11], 16).unwrap();
        let masked = seq.with_masked(&[true; 7]);
        assert_eq!(masked.special_mask(), seq.special_mask());
        assert_eq!(masked.ids()[0], crate::encoder::CLS);
        assert_eq!(encode(&masked, &params).unwrap().hidden.dim(), (7, 16));
    }

    #[test]
    fn rejects_bad_inputs() {
        let params = model(16);
        assert!(matches!(
            forward_chunk(&params, &[&[0, 99]]),
            Err(Error::TokenOutOfRange { id: 99, .. })
        ));
        assert!(forward_chunk(&params, &[&[0; 17]]).is_err());
        assert!(forward_chunk(&params, &[&[]]).is_err());
    }

    #[test]
    fn stacked_chunk_matches_single_sequences() {
        let params = model(64);
        let seqs: Vec<TokenSequence> = (0..11)
            .map(|i| pack_sequence(&[5 + i, 6, 7][..(i as usize % 3) + 1], &[9, 10 + i % 5], 16).unwrap())
            .collect();
        let refs: Vec<&TokenSequence> = seqs.iter().collect();
        let batch = encode_cls_batch(&params, &refs).unwrap();
        for (i, seq) in seqs.iter().enumerate() {
            assert_eq!(batch.row(i), encode(seq, &params).unwrap().cls());
        }
    }
}
