//! Loss terms of the training objective and their gradients.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::math;

/// Indices of the `⌈ρ·n⌉` negatives most similar to `anchor`, ties by position.
pub fn hard_negative_select(anchor: &[f64], negatives: &[&[f64]], rho: f64) -> Result<Vec<usize>> {
    if negatives.is_empty() {
        return Err(config("hard-negative selection needs at least one negative"));
    }
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(config(format!("hard-negative ratio must lie in (0, 1], got {rho}")));
    }
    let n = negatives.len();
    let keep = (math::ceil(rho * n as f64) as usize).clamp(1, n);
    let sims: Vec<f64> = negatives.iter().map(|v| math::cosine(anchor, v).unwrap_or(f64::NEG_INFINITY)).collect();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    idx.truncate(keep);
    Ok(idx)
}

/// `−log( e^{s⁺/τ} / (e^{s⁺/τ} + Σ e^{s⁻/τ}) )` with cosine similarity.
pub fn info_nce(g: &[f64], positive: &[f64], negatives: &[&[f64]], tau: f64) -> Result<f64> {
    Ok(info_nce_with_grad(g, positive, negatives, tau)?.0)
}

/// InfoNCE and its gradient w.r.t. `g`, treating all vectors as unit-norm
/// (so the similarity is a plain dot product).
pub fn info_nce_with_grad(g: &[f64], positive: &[f64], negatives: &[&[f64]], tau: f64) -> Result<(f64, Vec<f64>)> {
    if !(tau > 0.0) {
        return Err(config(format!("temperature must be positive, got {tau}")));
    }
    let mut logits = Vec::with_capacity(negatives.len() + 1);
    logits.push(math::dot(g, positive) / tau);
    logits.extend(negatives.iter().map(|n| math::dot(g, n) / tau));
    let lse = math::log_sum_exp(&logits);
    let loss = (lse - logits[0]).max(0.0);
    let mut grad = vec![0.0; g.len()];
    for (k, l) in logits.iter().enumerate() {
        let w = math::exp(l - lse) - if k == 0 { 1.0 } else { 0.0 };
        let v: &[f64] = if k == 0 { positive } else { negatives[k - 1] };
        for (d, x) in grad.iter_mut().zip(v) {
            *d += w * x / tau;
        }
    }
    Ok((loss, grad))
}

pub const PROB_CLAMP: f64 = 1e-7;

/// Binary cross-entropy from a logit, log-sigmoid form with probabilities
/// clamped to `[1e-7, 1 − 1e-7]`. Returns the loss and `d loss / d logit`.
pub fn bce_with_logit(logit: f64, y: f64) -> (f64, f64) {
    let ln_lo = math::ln(PROB_CLAMP);
    let ln_p = -math::softplus(-logit);
    let ln_q = -math::softplus(logit);
    let p = math::sigmoid(logit);
    let clamped_low = ln_p < ln_lo;
    let clamped_high = ln_q < ln_lo;
    let lp = ln_p.max(ln_lo);
    let lq = ln_q.max(ln_lo);
    let loss = -(y * lp + (1.0 - y) * lq);
    let dp = if clamped_low { 0.0 } else { -y * (1.0 - p) };
    let dq = if clamped_high { 0.0 } else { (1.0 - y) * p };
    (loss, dp + dq)
}

/// One sample's inputs to the objective, already resolved against state.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchSample<'a> {
    pub z: &'a [f64],
    pub g: &'a [f64],
    pub logit: f64,
    pub label: f64,
    /// Momentum embedding; `None` turns the consistency term off for this sample.
    pub g_m: Option<&'a [f64]>,
    /// Positive; `None` turns the contrastive term off for this sample.
    pub positive: Option<&'a [f64]>,
    pub negatives: Vec<&'a [f64]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub bce: f64,
    pub consistency: f64,
    pub contrastive: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Weights {
    pub tau: f64,
    pub lambda_con: f64,
    pub lambda_cr: f64,
}

/// Per-sample gradient pieces.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleGrad {
    pub d_g: Vec<f64>,
    pub d_logit: f64,
}

/// Batch mean of `BCE + λ_cr ‖g − g_m‖² + λ_con InfoNCE`. The breakdown
/// holds the unweighted batch means of each term; `total` is the weighted sum.
pub fn total_loss(batch: &[BatchSample<'_>], w: Weights) -> Result<(LossBreakdown, Vec<SampleGrad>)> {
    if batch.is_empty() {
        return Err(config("empty batch"));
    }
    let n = batch.len() as f64;
    let mut br = LossBreakdown::default();
    let mut grads = Vec::with_capacity(batch.len());
    for s in batch {
        let (bce, d_logit) = bce_with_logit(s.logit, s.label);
        br.bce += bce;
        let mut d_g = vec![0.0; s.g.len()];
        if let Some(gm) = s.g_m {
            let mut c = 0.0;
            for k in 0..s.g.len() {
                let diff = s.g[k] - gm[k];
                c += diff * diff;
                d_g[k] += w.lambda_cr * 2.0 * diff;
            }
            br.consistency += c;
        }
        if let Some(pos) = s.positive {
            let (l, dg) = info_nce_with_grad(s.g, pos, &s.negatives, w.tau)?;
            br.contrastive += l;
            for (a, b) in d_g.iter_mut().zip(&dg) {
                *a += w.lambda_con * b;
            }
        }
        grads.push(SampleGrad { d_g: d_g.iter().map(|x| x / n).collect(), d_logit: d_logit / n });
    }
    br.bce /= n;
    br.consistency /= n;
    br.contrastive /= n;
    br.total = br.bce + w.lambda_cr * br.consistency + w.lambda_con * br.contrastive;
    Ok((br, grads))
}
