//! Central finite-difference check of the analytic gradients on small random
//! models and batches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{backward, LossConfig, TrainError};
use crate::features::{DocumentFeatures, FeatureConfig, QueryFeatures};
use crate::towers::{init_params, Mode, ModelConfig, ModelParams, ParamId};

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckConfig {
    pub embed_dim: usize,
    pub batch_size: usize,
    pub step: f64,
    pub trigram_buckets: usize,
    pub word_buckets: usize,
    pub loss: LossConfig,
    /// Test hook: perturbs the analytic gradient of this tensor so the check
    /// must fail on it.
    pub corrupt: Option<ParamId>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self { embed_dim: 8, batch_size: 4, step: 1e-5, trigram_buckets: 64, word_buckets: 32, loss: LossConfig::default(), corrupt: None }
    }
}

/// Per-tensor relative error `‖a − n‖ / max(‖a‖ + ‖n‖, 1e-12)` between
/// analytic (`a`) and numeric (`n`) gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub seed: u64,
    pub per_tensor: Vec<(&'static str, f64)>,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.per_tensor.iter().map(|t| t.1).fold(0.0, f64::max)
    }
}

fn random_batch(
    rng: &mut ChaCha8Rng,
    feat: &FeatureConfig,
    b: usize,
) -> (Vec<QueryFeatures>, Vec<DocumentFeatures>, Vec<u8>) {
    let ids = |rng: &mut ChaCha8Rng, n: usize, buckets: usize| -> Vec<u32> {
        (0..n).map(|_| rng.gen_range(0..buckets as u32)).collect()
    };
    let mut queries = Vec::new();
    let mut docs = Vec::new();
    for i in 0..b {
        let nt = rng.gen_range(1..6);
        let nw = rng.gen_range(1..4);
        queries.push(QueryFeatures {
            trigram_ids: ids(rng, nt, feat.trigram_buckets),
            word_ids: ids(rng, nw, feat.word_buckets),
            country_id: rng.gen_range(0..feat.country_vocab_size as u32),
        });
        let nt = rng.gen_range(1..10);
        let nw = rng.gen_range(1..5);
        // Pair 0 is always engaged; giving it images routes the image
        // tower through the (non-saturating) relevance softmax, so its
        // gradient is never too small for finite differences to resolve.
        let ni = if i == 0 { rng.gen_range(1..3) } else { rng.gen_range(0..3) };
        docs.push(DocumentFeatures {
            trigram_ids: ids(rng, nt, feat.trigram_buckets),
            word_ids: ids(rng, nw, feat.word_buckets),
            context_raw: (0..feat.context_dim_out).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            image_vectors: (0..ni).map(|_| (0..feat.image_dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect(),
        });
    }
    // At least two engaged pairs (a non-trivial relevance softmax) and one
    // not-engaged pair.
    let mut labels: Vec<u8> = (0..b).map(|_| rng.gen_range(0..2)).collect();
    labels[0] = 1;
    labels[1] = 1;
    if b > 2 {
        labels[b - 1] = 0;
    }
    (queries, docs, labels)
}

/// Compares analytic gradients with central differences for one seeded
/// model and batch (train mode, fixed dropout masks).
pub fn gradient_check(seed: u64, cfg: &GradcheckConfig) -> Result<GradcheckReport, TrainError> {
    let feat = FeatureConfig {
        trigram_buckets: cfg.trigram_buckets,
        word_buckets: cfg.word_buckets,
        country_vocab_size: 4,
        image_dim: 4,
        context_dim_out: 5,
        ..Default::default()
    };
    let model = ModelConfig {
        embed_dim: cfg.embed_dim,
        fusion_hidden: cfg.embed_dim,
        context_hidden: 6,
        init_seed: seed,
        ..Default::default()
    };
    let mut params = init_params(&model, &feat)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let (queries, docs, labels) = random_batch(&mut rng, &feat, cfg.batch_size);
    let batch: Vec<(&QueryFeatures, &DocumentFeatures, u8)> =
        queries.iter().zip(&docs).zip(&labels).map(|((q, d), &y)| (q, d, y)).collect();
    let mode = Mode::Train { seed };
    let loss_at = |p: &ModelParams| -> Result<f64, TrainError> { Ok(backward(&batch, p, &cfg.loss, mode, 0)?.loss.total) };

    let mut analytic = backward(&batch, &params, &cfg.loss, mode, 0)?.grads;
    if let Some(id) = cfg.corrupt {
        for g in analytic.get_mut(id).iter_mut() {
            *g = *g * 1.5 + 1e-3;
        }
    }
    let mut per_tensor = Vec::new();
    for id in ParamId::ALL {
        let i = id as usize;
        let a = &analytic.tensors[i];
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut n2 = 0.0;
        for k in 0..a.len() {
            let orig = params.tensors[i].data[k];
            params.tensors[i].data[k] = orig + cfg.step;
            let plus = loss_at(&params)?;
            params.tensors[i].data[k] = orig - cfg.step;
            let minus = loss_at(&params)?;
            params.tensors[i].data[k] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            diff2 += (a[k] - numeric).powi(2);
            a2 += a[k] * a[k];
            n2 += numeric * numeric;
        }
        let rel = diff2.sqrt() / (a2.sqrt() + n2.sqrt()).max(1e-12);
        per_tensor.push((id.name(), rel));
    }
    Ok(GradcheckReport { seed, per_tensor })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_model_gradients_match() {
        let r = gradient_check(3, &GradcheckConfig::default()).unwrap();
        assert!(r.max_rel_error() <= 1e-4, "{:?}", r.per_tensor);
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let cfg = GradcheckConfig { corrupt: Some(ParamId::DocAttention), ..Default::default() };
        let r = gradient_check(3, &cfg).unwrap();
        let bad: Vec<_> = r.per_tensor.iter().filter(|t| t.1 > 1e-4).map(|t| t.0).collect();
        assert_eq!(bad, vec![ParamId::DocAttention.name()]);
    }
}
