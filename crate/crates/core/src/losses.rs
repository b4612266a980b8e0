//! Huber regression loss, the clamped pairwise cosine loss between block
//! latents, and the composite training objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Graph, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the per-block auxiliary RUL heads.
    pub lambda: f64,
    /// Weight of the cosine divergence term.
    pub sigma: f64,
    /// Huber transition point, in cycles.
    pub beta: f64,
    /// Floor on the cosine denominator.
    pub epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 0.3,
            sigma: 1.0,
            beta: 1.0,
            epsilon: 1e-7,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.lambda, self.sigma, self.epsilon]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0)
            && self.beta > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("loss weights out of range: {self:?}")))
        }
    }
}

pub fn huber(pred: f64, target: f64, beta: f64) -> f64 {
    let d = (pred - target).abs();
    if d < beta {
        0.5 * d * d
    } else {
        beta * (d - 0.5 * beta)
    }
}

/// Mean Huber loss over a batch.
pub fn huber_mean(preds: &[f64], targets: &[f64], beta: f64) -> Result<f64> {
    if preds.len() != targets.len() {
        return Err(Error::shape(format!(
            "huber: {} predictions vs {} targets",
            preds.len(),
            targets.len()
        )));
    }
    if preds.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = preds.iter().zip(targets).map(|(p, t)| huber(*p, *t, beta)).sum();
    Ok(total / preds.len() as f64)
}

/// Cosine similarity with the denominator floored at `eps`.
pub fn cosine(a: &[f64], b: &[f64], eps: f64) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(eps)
}

/// Sum over ordered pairs `i != j` of `max(cos(z_i, z_j), 0)`.
///
/// Fewer than two latents give 0.
pub fn mcosine(latents: &[Vec<f64>], eps: f64) -> Result<f64> {
    if let Some(first) = latents.first() {
        if let Some(bad) = latents.iter().find(|z| z.len() != first.len()) {
            return Err(Error::shape(format!(
                "mcosine: latent dimensions {} and {}",
                first.len(),
                bad.len()
            )));
        }
    }
    let rows: Vec<&[f64]> = latents.iter().map(Vec::as_slice).collect();
    Ok(mcosine_slices(&rows, eps))
}

pub(crate) fn mcosine_slices(rows: &[&[f64]], eps: f64) -> f64 {
    let mut total = 0.0;
    for (i, a) in rows.iter().enumerate() {
        for (j, b) in rows.iter().enumerate() {
            if i != j {
                total += cosine(a, b, eps).max(0.0);
            }
        }
    }
    total
}

/// Adds `scale * d mcosine / d z_k` into `out[k]`.
pub(crate) fn mcosine_slices_grad(rows: &[&[f64]], eps: f64, scale: f64, out: &mut [&mut [f64]]) {
    let norms: Vec<f64> = rows
        .iter()
        .map(|z| z.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    for i in 0..rows.len() {
        for j in 0..rows.len() {
            if i == j {
                continue;
            }
            let (a, b) = (rows[i], rows[j]);
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let raw = norms[i] * norms[j];
            let den = raw.max(eps);
            let c = dot / den;
            if c <= 0.0 {
                continue;
            }
            if raw > eps {
                let (ai, bj) = (norms[i] * norms[i], norms[j] * norms[j]);
                for d in 0..a.len() {
                    out[i][d] += scale * (b[d] / den - c * a[d] / ai);
                    out[j][d] += scale * (a[d] / den - c * b[d] / bj);
                }
            } else {
                for d in 0..a.len() {
                    out[i][d] += scale * b[d] / den;
                    out[j][d] += scale * a[d] / den;
                }
            }
        }
    }
}

/// Single-sample composite objective:
/// `huber(model) + lambda * sum_k huber(block_k) + sigma * mcosine(latents)`.
pub fn composite_loss(
    model_pred: f64,
    block_preds: &[f64],
    latents: &[Vec<f64>],
    target: f64,
    weights: &LossWeights,
) -> Result<f64> {
    if block_preds.len() != latents.len() {
        return Err(Error::shape(format!(
            "composite loss: {} block predictions vs {} latents",
            block_preds.len(),
            latents.len()
        )));
    }
    let blocks: f64 = block_preds.iter().map(|p| huber(*p, target, weights.beta)).sum();
    let cos = if latents.len() > 1 {
        mcosine(latents, weights.epsilon)?
    } else {
        0.0
    };
    Ok(huber(model_pred, target, weights.beta) + weights.lambda * blocks + weights.sigma * cos)
}

/// Batched composite objective on the tape.
///
/// `aux_preds` are extra intermediate heads weighted like block heads.
pub fn composite_loss_graph(
    g: &mut Graph,
    pred: Var,
    block_preds: &[Var],
    aux_preds: &[Var],
    latents: &[Var],
    target: Var,
    weights: &LossWeights,
) -> Var {
    let mut loss = g.huber_mean(pred, target, weights.beta);
    let heads: Vec<Var> = block_preds.iter().chain(aux_preds).copied().collect();
    if !heads.is_empty() && weights.lambda != 0.0 {
        let mut sum = g.huber_mean(heads[0], target, weights.beta);
        for &h in &heads[1..] {
            let l = g.huber_mean(h, target, weights.beta);
            sum = g.add(sum, l);
        }
        let weighted = g.scale(sum, weights.lambda);
        loss = g.add(loss, weighted);
    }
    if latents.len() > 1 && weights.sigma != 0.0 {
        let cos = g.mcosine_mean(latents, weights.epsilon);
        let weighted = g.scale(cos, weights.sigma);
        loss = g.add(loss, weighted);
    }
    loss
}
