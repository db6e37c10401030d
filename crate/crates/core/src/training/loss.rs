use serde::{Deserialize, Serialize};

use super::TrainError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Logit scale applied to cosine similarities, in [15, 20].
    pub scale: f64,
    pub lambda_relevance: f64,
    pub lambda_engagement: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { scale: 20.0, lambda_relevance: 0.2, lambda_engagement: 0.8 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(15.0..=20.0).contains(&self.scale) {
            return Err(TrainError::InvalidConfig(format!("scale {} outside [15, 20]", self.scale)));
        }
        if !(self.lambda_relevance >= 0.0 && self.lambda_engagement >= 0.0) {
            return Err(TrainError::InvalidConfig("loss weights must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchLossBreakdown {
    pub relevance: f64,
    pub engagement: f64,
    pub total: f64,
    /// Engagement probabilities `σ(s·κ(q_i, d_i))`.
    pub logits: Vec<f64>,
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Scaled in-batch softmax cross-entropy where document `i` is the match for
/// query `i`. Returns the loss and its gradient w.r.t. `sim`.
pub fn relevance_loss(sim: &[Vec<f64>], scale: f64) -> Result<(f64, Vec<Vec<f64>>), TrainError> {
    let b = sim.len();
    if sim.iter().any(|row| row.len() != b) {
        return Err(TrainError::NotSquare);
    }
    if b == 0 {
        return Ok((0.0, Vec::new()));
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(b);
    for (i, row) in sim.iter().enumerate() {
        let logits: Vec<f64> = row.iter().map(|v| scale * v).collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss -= logits[i] - max - z.ln();
        grad.push(
            exps.iter()
                .enumerate()
                .map(|(j, e)| scale / b as f64 * (e / z - if i == j { 1.0 } else { 0.0 }))
                .collect(),
        );
    }
    Ok((loss / b as f64, grad))
}

/// Mean binary cross-entropy on `σ(s·κ)`. Returns the loss, its gradient
/// w.r.t. each κ, and the probabilities.
pub fn engagement_loss(pairs: &[(f64, u8)], scale: f64) -> Result<(f64, Vec<f64>, Vec<f64>), TrainError> {
    if pairs.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let n = pairs.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(pairs.len());
    let mut probs = Vec::with_capacity(pairs.len());
    for &(kappa, y) in pairs {
        let z = scale * kappa;
        let y = f64::from(y);
        loss += y * softplus(-z) + (1.0 - y) * softplus(z);
        let c = sigmoid(z);
        grad.push(scale / n * (c - y));
        probs.push(c);
    }
    Ok((loss / n, grad, probs))
}

pub fn total_loss(relevance: f64, engagement: f64, cfg: &LossConfig) -> f64 {
    cfg.lambda_relevance * relevance + cfg.lambda_engagement * engagement
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Multitask loss over a batch of embedded pairs. Engaged pairs (label 1)
/// form the in-batch relevance problem; every pair enters the engagement
/// loss. Returns the breakdown and gradients w.r.t. query and document
/// embeddings.
pub fn batch_loss(
    queries: &[Vec<f64>],
    docs: &[Vec<f64>],
    labels: &[u8],
    cfg: &LossConfig,
) -> Result<(BatchLossBreakdown, Vec<Vec<f64>>, Vec<Vec<f64>>), TrainError> {
    let d = queries.first().map_or(0, Vec::len);
    let mut gq = vec![vec![0.0; d]; queries.len()];
    let mut gd = vec![vec![0.0; d]; docs.len()];

    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
    let sim: Vec<Vec<f64>> = pos.iter().map(|&i| pos.iter().map(|&j| dot(&queries[i], &docs[j])).collect()).collect();
    let (relevance, g_sim) = relevance_loss(&sim, cfg.scale)?;
    for (a, &i) in pos.iter().enumerate() {
        for (b, &j) in pos.iter().enumerate() {
            let g = cfg.lambda_relevance * g_sim[a][b];
            for k in 0..d {
                gq[i][k] += g * docs[j][k];
                gd[j][k] += g * queries[i][k];
            }
        }
    }

    let pairs: Vec<(f64, u8)> =
        queries.iter().zip(docs).zip(labels).map(|((q, doc), &y)| (dot(q, doc), y)).collect();
    let (engagement, g_kappa, logits) = engagement_loss(&pairs, cfg.scale)?;
    for i in 0..pairs.len() {
        let g = cfg.lambda_engagement * g_kappa[i];
        for k in 0..d {
            gq[i][k] += g * docs[i][k];
            gd[i][k] += g * queries[i][k];
        }
    }
    let total = total_loss(relevance, engagement, cfg);
    Ok((BatchLossBreakdown { relevance, engagement, total, logits }, gq, gd))
}
