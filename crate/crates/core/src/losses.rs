//! Soft-label cross-entropy, supervised contrastive and mean-squared-error
//! objectives, their weighted sum, and analytic gradients.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::hard_label;

/// Lower bound applied to probabilities inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub beta_ce: f64,
    pub beta_scl: f64,
    pub beta_mse: f64,
    pub tau: f64,
    /// L2-normalize embeddings before the contrastive dot products.
    #[serde(default)]
    pub normalize_embeddings: bool,
    /// Use argmax(y) instead of the full soft label in the CE term.
    #[serde(default)]
    pub hard_label_ce: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta_ce: 1e-2,
            beta_scl: 1e-3,
            beta_mse: 1.0,
            tau: 1.0,
            normalize_embeddings: false,
            hard_label_ce: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let betas = [self.beta_ce, self.beta_scl, self.beta_mse];
        if betas.iter().any(|b| !b.is_finite() || *b < 0.0) {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        if betas.iter().all(|b| *b == 0.0) {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config("tau must be positive".into()));
        }
        Ok(())
    }
}

fn check_lengths(y: &[f64], y_hat: &[f64]) -> Result<()> {
    if y.len() != y_hat.len() {
        return Err(Error::Shape(format!(
            "label of length {} against prediction of length {}",
            y.len(),
            y_hat.len()
        )));
    }
    Ok(())
}

/// −Σ_c y_c log(max(ŷ_c, 1e-12)) for one instance.
pub fn ce_loss(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_lengths(y, y_hat)?;
    Ok(-y
        .iter()
        .zip(y_hat)
        .map(|(&t, &p)| if t == 0.0 { 0.0 } else { t * p.max(PROB_FLOOR).ln() })
        .sum::<f64>())
}

/// (1/|C|) Σ_c (y_c − ŷ_c)² for one instance.
pub fn mse_loss(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_lengths(y, y_hat)?;
    let sum: f64 = y.iter().zip(y_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / y.len() as f64)
}

/// Supervised contrastive loss over a batch, summed over anchors. Anchors
/// whose class has no other member in the batch contribute 0.
pub fn scl_loss(embeddings: ArrayView2<'_, f64>, labels: &[usize], tau: f64) -> Result<f64> {
    Ok(scl_with_grad(embeddings, labels, tau, false)?.0)
}

fn scl_with_grad(
    embeddings: ArrayView2<'_, f64>,
    labels: &[usize],
    tau: f64,
    want_grad: bool,
) -> Result<(f64, Option<Array2<f64>>)> {
    let n = embeddings.nrows();
    if n < 2 {
        return Err(Error::Shape(format!(
            "contrastive loss needs a batch of at least 2, got {n}"
        )));
    }
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} embeddings", labels.len())));
    }
    let sims = embeddings.dot(&embeddings.t()) / tau;
    let mut loss = 0.0;
    let mut d_sims = want_grad.then(|| Array2::<f64>::zeros((n, n)));
    for i in 0..n {
        let positives = (0..n).filter(|&j| j != i && labels[j] == labels[i]).count();
        if positives == 0 {
            continue;
        }
        let row = sims.row(i);
        let max = (0..n)
            .filter(|&k| k != i)
            .map(|k| row[k])
            .fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..n).filter(|&k| k != i).map(|k| (row[k] - max).exp()).sum();
        let lse = max + denom.ln();
        let inv = 1.0 / positives as f64;
        for j in (0..n).filter(|&j| j != i && labels[j] == labels[i]) {
            loss -= inv * (row[j] - lse);
        }
        if let Some(ds) = d_sims.as_mut() {
            for k in (0..n).filter(|&k| k != i) {
                let softmax = (row[k] - lse).exp();
                let positive = if labels[k] == labels[i] { inv } else { 0.0 };
                ds[[i, k]] += softmax - positive;
            }
        }
    }
    // s_ik = Φ_i·Φ_k / τ, so dΦ = (dS + dSᵀ) Φ / τ.
    let grad = d_sims.map(|ds| (&ds + &ds.t()).dot(&embeddings) / tau);
    Ok((loss, grad))
}

fn l2_normalize(x: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let norms = x.map_axis(Axis(1), |r| r.dot(&r).sqrt().max(PROB_FLOOR));
    let mut z = x.clone();
    for (mut row, &n) in z.rows_mut().into_iter().zip(&norms) {
        row /= n;
    }
    (z, norms)
}

fn l2_normalize_backward(z: &Array2<f64>, norms: &Array1<f64>, dz: &Array2<f64>) -> Array2<f64> {
    let mut dx = dz.clone();
    for (i, mut row) in dx.rows_mut().into_iter().enumerate() {
        let zi = z.row(i);
        let proj = zi.dot(&dz.row(i));
        row.scaled_add(-proj, &zi);
        row /= norms[i];
    }
    dx
}

pub fn softmax(logits: ArrayView1<'_, f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut p = logits.mapv(|v| (v - max).exp());
    let sum = p.sum();
    p /= sum;
    p
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub scl: f64,
    pub mse: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrads {
    /// dL/dg, `batch x |C|`.
    pub logits: Array2<f64>,
    /// dL/dΦ, `batch x d`.
    pub embeddings: Array2<f64>,
}

/// β₁·CE + β₂·SCL + β₃·MSE over a batch. CE and MSE are means over the batch;
/// SCL is summed over anchors. Returns the breakdown and the gradients with
/// respect to the logits and the `[CLS]` embeddings.
pub fn combined_loss(
    logits: ArrayView2<'_, f64>,
    targets: &[&[f64]],
    embeddings: ArrayView2<'_, f64>,
    weights: &LossWeights,
) -> Result<(LossBreakdown, LossGrads)> {
    weights.validate()?;
    let (b, c) = logits.dim();
    if targets.len() != b || embeddings.nrows() != b {
        return Err(Error::Shape(format!(
            "batch of {b} logits, {} targets, {} embeddings",
            targets.len(),
            embeddings.nrows()
        )));
    }
    if b == 0 {
        return Err(Error::Empty("loss batch".into()));
    }
    let inv_b = 1.0 / b as f64;
    let mut ce = 0.0;
    let mut mse = 0.0;
    let mut d_logits = Array2::zeros((b, c));
    for (i, target) in targets.iter().enumerate() {
        if target.len() != c {
            return Err(Error::at_index(
                i,
                Error::Shape(format!("label of length {} for {c} classes", target.len())),
            ));
        }
        let p = softmax(logits.row(i));
        let ce_target: Vec<f64> = if weights.hard_label_ce {
            let mut t = vec![0.0; c];
            t[hard_label(target)] = 1.0;
            t
        } else {
            target.to_vec()
        };
        let p_slice = p.as_slice().expect("contiguous");
        ce += ce_loss(&ce_target, p_slice)?;
        mse += mse_loss(target, p_slice)?;
        // a_k = p_k dL/dp_k; then dL/dg_j = a_j − p_j Σ_k a_k.
        let a: Vec<f64> = (0..c)
            .map(|k| {
                let ce_part = if p[k] >= PROB_FLOOR { -ce_target[k] } else { 0.0 };
                let mse_part = p[k] * 2.0 * (p[k] - target[k]) / c as f64;
                inv_b * (weights.beta_ce * ce_part + weights.beta_mse * mse_part)
            })
            .collect();
        let sum_a: f64 = a.iter().sum();
        for j in 0..c {
            d_logits[[i, j]] = a[j] - p[j] * sum_a;
        }
    }
    ce *= inv_b;
    mse *= inv_b;

    let labels: Vec<usize> = targets.iter().map(|t| hard_label(t)).collect();
    let mut d_emb = Array2::zeros(embeddings.raw_dim());
    let mut scl = 0.0;
    if b >= 2 {
        let (scl_value, grad) = if weights.normalize_embeddings {
            let (z, norms) = l2_normalize(&embeddings.to_owned());
            let (l, dz) = scl_with_grad(z.view(), &labels, weights.tau, true)?;
            (l, l2_normalize_backward(&z, &norms, &dz.expect("gradient requested")))
        } else {
            let (l, g) = scl_with_grad(embeddings, &labels, weights.tau, true)?;
            (l, g.expect("gradient requested"))
        };
        scl = scl_value;
        d_emb = grad * weights.beta_scl;
    }
    let total = weights.beta_ce * ce + weights.beta_scl * scl + weights.beta_mse * mse;
    if !total.is_finite() {
        return Err(Error::NonFinite("combined loss".into()));
    }
    Ok((
        LossBreakdown { ce, scl, mse, total },
        LossGrads {
            logits: d_logits,
            embeddings: d_emb,
        },
    ))
}
