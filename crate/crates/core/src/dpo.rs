//! Direct preference optimization objective for a single pair and batches.
//!
//! `m = β · [(π_c − ref_c) − (π_r − ref_r)]`, `loss = softplus(−m)`.
//! Inputs are sequence log-probabilities summed over tokens.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DpoError {
    #[error("non-finite input: {0}")]
    NonFiniteInput(&'static str),
    #[error("empty batch")]
    EmptyBatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairLogProbs {
    pub policy_chosen: f64,
    pub ref_chosen: f64,
    pub policy_rejected: f64,
    pub ref_rejected: f64,
}

impl PairLogProbs {
    pub fn to_array(self) -> [f64; 4] {
        [self.policy_chosen, self.ref_chosen, self.policy_rejected, self.ref_rejected]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self {
            policy_chosen: a[0],
            ref_chosen: a[1],
            policy_rejected: a[2],
            ref_rejected: a[3],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpoResult {
    pub loss: f64,
    pub margin: f64,
    /// d loss / d (policy_chosen, ref_chosen, policy_rejected, ref_rejected).
    pub grad: [f64; 4],
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Logistic function, stable at both tails.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn dpo_loss(lp: PairLogProbs, beta: f64) -> Result<DpoResult, DpoError> {
    if !beta.is_finite() {
        return Err(DpoError::NonFiniteInput("beta"));
    }
    let names = ["policy_chosen", "ref_chosen", "policy_rejected", "ref_rejected"];
    for (v, name) in lp.to_array().iter().zip(names) {
        if !v.is_finite() {
            return Err(DpoError::NonFiniteInput(name));
        }
    }
    let margin = beta * ((lp.policy_chosen - lp.ref_chosen) - (lp.policy_rejected - lp.ref_rejected));
    if !margin.is_finite() {
        return Err(DpoError::NonFiniteInput("margin"));
    }
    let s = beta * sigmoid(-margin);
    Ok(DpoResult {
        loss: softplus(-margin),
        margin,
        grad: [-s, s, s, -s],
    })
}

/// Mean loss and mean per-pair gradient.
pub fn dpo_batch_loss(batch: &[PairLogProbs], beta: f64) -> Result<(f64, Vec<[f64; 4]>), DpoError> {
    if batch.is_empty() {
        return Err(DpoError::EmptyBatch);
    }
    let n = batch.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(batch.len());
    for lp in batch {
        let r = dpo_loss(*lp, beta)?;
        total += r.loss;
        grads.push(r.grad.map(|g| g / n));
    }
    Ok((total / n, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub analytic: [f64; 4],
    pub numeric: [f64; 4],
    /// `max_i |a_i − n_i| / max(|a_i|, |n_i|, 1e-8)`.
    pub max_rel_error: f64,
}

/// Central finite differences with step `h` against the analytic gradient.
pub fn grad_check(lp: PairLogProbs, beta: f64, h: f64) -> Result<GradCheck, DpoError> {
    let analytic = dpo_loss(lp, beta)?.grad;
    let base = lp.to_array();
    let mut numeric = [0.0; 4];
    for i in 0..4 {
        let mut plus = base;
        let mut minus = base;
        plus[i] += h;
        minus[i] -= h;
        let fp = dpo_loss(PairLogProbs::from_array(plus), beta)?.loss;
        let fm = dpo_loss(PairLogProbs::from_array(minus), beta)?.loss;
        numeric[i] = (fp - fm) / (2.0 * h);
    }
    let max_rel_error = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
        .fold(0.0, f64::max);
    Ok(GradCheck {
        analytic,
        numeric,
        max_rel_error,
    })
}
