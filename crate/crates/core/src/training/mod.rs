//! Multitask training: in-batch relevance loss, engagement loss, manual
//! backpropagation through both towers, Adam with warmup and clipping, and
//! early stopping on validation ROC AUC.

pub mod checkpoint;
pub mod gradcheck;
pub mod loss;
pub mod optim;

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, CheckpointMeta, NamedTensor};
pub use gradcheck::{gradient_check, GradcheckConfig, GradcheckReport};
pub use loss::{batch_loss, engagement_loss, relevance_loss, total_loss, BatchLossBreakdown, LossConfig};
pub use optim::{adam_step, clip_gradients, lr_at_step, OptimizerState, TrainConfig};

use crate::corpus::DatasetBundle;
use crate::evalmetrics::{binarize, roc_auc, LabelScheme, MetricError};
use crate::features::{featurize_document, featurize_query, DocumentFeatures, FeatureConfig, FeatureError, QueryFeatures};
use crate::towers::{
    embed_documents, embed_query, init_params, BatchForward, BatchNormStats, Grads, Mode, ModelConfig, ModelError,
    ModelParams, ParamGroup,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("similarity matrix must be square")]
    NotSquare,
    #[error("empty batch")]
    EmptyBatch,
    #[error("batch size must be at least 2 (batch normalization), got {0}")]
    BatchTooSmall(usize),
    #[error("non-finite loss or gradient in batch {batch}")]
    NonFinite { batch: u64 },
    #[error("training set has no engagement records")]
    EmptyTrainingSet,
    #[error("validation split is unusable: {0}")]
    Validation(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Everything needed to build and train a model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainSetup {
    pub model: ModelConfig,
    pub features: FeatureConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

impl TrainSetup {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.model.validate()?;
        self.features.validate()?;
        self.loss.validate()?;
        self.train.validate()
    }
}

/// Result of one forward/backward pass over a batch.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub loss: BatchLossBreakdown,
    pub grads: Grads,
    /// Batch-norm running statistics after this batch (train mode only).
    pub bn: Option<BatchNormStats>,
}

/// Loss and gradients for every parameter tensor on one labelled batch.
pub fn backward(
    batch: &[(&QueryFeatures, &DocumentFeatures, u8)],
    params: &ModelParams,
    loss_cfg: &LossConfig,
    mode: Mode,
    batch_id: u64,
) -> Result<StepOutput, TrainError> {
    if batch.len() < 2 {
        return Err(TrainError::BatchTooSmall(batch.len()));
    }
    let pairs: Vec<(&QueryFeatures, &DocumentFeatures)> = batch.iter().map(|(q, d, _)| (*q, *d)).collect();
    let labels: Vec<u8> = batch.iter().map(|b| b.2).collect();
    let fwd = BatchForward::run(&pairs, params, mode)?;
    let (loss, gq, gd) = batch_loss(&fwd.query_embeddings(), &fwd.doc_embeddings(), &labels, loss_cfg)?;
    if !loss.total.is_finite() {
        return Err(TrainError::NonFinite { batch: batch_id });
    }
    let grads = fwd.backward(params, &gq, &gd);
    if !grads.global_norm().is_finite() {
        return Err(TrainError::NonFinite { batch: batch_id });
    }
    Ok(StepOutput { loss, grads, bn: fwd.updated_bn(&params.bn) })
}

/// Patience-based early stopping on a higher-is-better metric.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<f64>,
    pub best_epoch: Option<usize>,
    pub bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: None, best_epoch: None, bad_epochs: 0 }
    }

    /// Records an epoch's metric; returns `true` when it is a new best.
    pub fn observe(&mut self, epoch: usize, metric: f64) -> bool {
        if self.best.is_none_or(|b| metric > b) {
            self.best = Some(metric);
            self.best_epoch = Some(epoch);
            self.bad_epochs = 0;
            true
        } else {
            self.bad_epochs += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.bad_epochs >= self.patience
    }
}

/// Featurized (query, listing, label) triples sharing per-listing features.
#[derive(Debug, Clone)]
pub struct PreparedPairs {
    pub queries: Vec<QueryFeatures>,
    pub docs: Vec<DocumentFeatures>,
    /// (query index, doc index, label)
    pub pairs: Vec<(usize, usize, u8)>,
}

impl PreparedPairs {
    /// Featurizes `(query id, listing id, label)` triples against `bundle`.
    pub fn build<'a>(
        bundle: &DatasetBundle,
        triples: impl IntoIterator<Item = (&'a str, &'a str, u8)>,
        cfg: &FeatureConfig,
    ) -> Result<Self, TrainError> {
        let qmap = bundle.query_map();
        let mut q_index: HashMap<&str, usize> = HashMap::new();
        let mut d_index: HashMap<&str, usize> = HashMap::new();
        let mut out = PreparedPairs { queries: Vec::new(), docs: Vec::new(), pairs: Vec::new() };
        for (qid, lid, label) in triples {
            let qi = match q_index.get(qid) {
                Some(&i) => i,
                None => {
                    let q = qmap.get(qid).ok_or_else(|| TrainError::Validation(format!("unknown query {qid}")))?;
                    out.queries.push(featurize_query(q, cfg)?);
                    q_index.insert(qid, out.queries.len() - 1);
                    out.queries.len() - 1
                }
            };
            let di = match d_index.get(lid) {
                Some(&i) => i,
                None => {
                    let l = bundle
                        .listings
                        .get(lid)
                        .ok_or_else(|| TrainError::Validation(format!("unknown listing {lid}")))?;
                    out.docs.push(featurize_document(l, cfg, cfg.reference_time)?);
                    d_index.insert(lid, out.docs.len() - 1);
                    out.docs.len() - 1
                }
            };
            out.pairs.push((qi, di, label));
        }
        Ok(out)
    }

    pub fn engagements(bundle: &DatasetBundle, cfg: &FeatureConfig) -> Result<Self, TrainError> {
        Self::build(
            bundle,
            bundle.engagements.iter().map(|e| (e.query_id.as_str(), e.listing_id.as_str(), e.label)),
            cfg,
        )
    }

    /// Validation pairs: judgments binarized Relevant-vs-rest when both
    /// classes occur, otherwise engagement labels.
    pub fn validation(bundle: &DatasetBundle, cfg: &FeatureConfig) -> Result<Self, TrainError> {
        let grades: Vec<_> = bundle.judgments.iter().map(|j| j.grade).collect();
        let labels = binarize(&grades, LabelScheme::PbcO);
        if labels.contains(&0) && labels.contains(&1) {
            Self::build(
                bundle,
                bundle.judgments.iter().zip(labels).map(|(j, y)| (j.query_id.as_str(), j.listing_id.as_str(), y)),
                cfg,
            )
        } else {
            Self::engagements(bundle, cfg)
        }
    }

    /// Cosine score of every pair under eval mode, in pair order.
    pub fn scores(&self, params: &ModelParams) -> Result<Vec<f64>, TrainError> {
        let qe = self
            .queries
            .iter()
            .map(|q| embed_query(q, params, Mode::Eval))
            .collect::<Result<Vec<_>, _>>()?;
        let refs: Vec<&DocumentFeatures> = self.docs.iter().collect();
        let de = embed_documents(&refs, params, Mode::Eval)?;
        Ok(self.pairs.iter().map(|&(q, d, _)| qe[q].iter().zip(&de[d]).map(|(a, b)| a * b).sum()).collect())
    }

    pub fn labels(&self) -> Vec<u8> {
        self.pairs.iter().map(|p| p.2).collect()
    }

    /// ROC AUC of the eval-mode cosine scores.
    pub fn roc_auc(&self, params: &ModelParams) -> Result<f64, TrainError> {
        Ok(roc_auc(&self.scores(params)?, &self.labels())?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_loss: f64,
    pub valid_auc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochSummary>,
    /// Tab-separated training-log lines (header first).
    pub log: Vec<String>,
}

impl TrainOutcome {
    pub fn best_valid_auc(&self) -> f64 {
        self.checkpoint.meta.best_valid_auc
    }

    pub fn valid_evaluations(&self) -> usize {
        self.history.len()
    }
}

pub const LOG_HEADER: &str = "step\tlr_encoder\tlr_other\tL_relevance\tL_engagement\tL_total";

fn dropout_seed(seed: u64, step: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ step.wrapping_add(1).wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

/// Trains from the model's seeded initialization; see [`train_from`].
pub fn train(train_set: &DatasetBundle, valid_set: &DatasetBundle, setup: &TrainSetup) -> Result<TrainOutcome, TrainError> {
    setup.validate()?;
    let params = init_params(&setup.model, &setup.features)?;
    train_from(params, train_set, valid_set, setup)
}

/// Seeded-shuffle epochs of mini-batches; after each epoch the validation
/// ROC AUC decides early stopping. Returns the best epoch's checkpoint.
pub fn train_from(
    mut params: ModelParams,
    train_set: &DatasetBundle,
    valid_set: &DatasetBundle,
    setup: &TrainSetup,
) -> Result<TrainOutcome, TrainError> {
    setup.validate()?;
    let tc = &setup.train;
    if train_set.engagements.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    let data = PreparedPairs::engagements(train_set, &setup.features)?;
    let valid = PreparedPairs::validation(valid_set, &setup.features)?;
    let mut state = OptimizerState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut stopper = EarlyStopping::new(tc.patience);
    let mut best = params.clone();
    let mut best_step = 0;
    let mut history = Vec::new();
    let mut log = vec![LOG_HEADER.to_owned()];
    let mut order: Vec<usize> = (0..data.pairs.len()).collect();

    for epoch in 0..tc.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(tc.batch_size).filter(|c| c.len() >= 2) {
            let batch: Vec<(&QueryFeatures, &DocumentFeatures, u8)> = chunk
                .iter()
                .map(|&i| {
                    let (q, d, y) = data.pairs[i];
                    (&data.queries[q], &data.docs[d], y)
                })
                .collect();
            let step = state.t;
            let mut out = backward(&batch, &params, &setup.loss, Mode::Train { seed: dropout_seed(tc.seed, step) }, step)?;
            clip_gradients(&mut out.grads, tc.clip_norm);
            adam_step(&mut params, &out.grads, &mut state, tc);
            if let Some(bn) = out.bn {
                params.bn = bn;
            }
            if !params.all_finite() {
                return Err(TrainError::NonFinite { batch: step });
            }
            loss_sum += out.loss.total;
            batches += 1;
            if step % tc.log_every == 0 {
                log.push(format!(
                    "{step}\t{:.6e}\t{:.6e}\t{:.6}\t{:.6}\t{:.6}",
                    lr_at_step(step, ParamGroup::Encoder, tc),
                    lr_at_step(step, ParamGroup::Other, tc),
                    out.loss.relevance,
                    out.loss.engagement,
                    out.loss.total
                ));
            }
        }
        if batches == 0 {
            return Err(TrainError::BatchTooSmall(data.pairs.len()));
        }
        let auc = valid.roc_auc(&params)?;
        history.push(EpochSummary { epoch, mean_loss: loss_sum / batches as f64, valid_auc: auc });
        if stopper.observe(epoch, auc) {
            best = params.clone();
            best_step = state.t;
        }
        if stopper.should_stop() {
            break;
        }
    }

    let meta = CheckpointMeta {
        model: setup.model.clone(),
        features: setup.features.clone(),
        loss: setup.loss.clone(),
        batch_size: tc.batch_size,
        best_valid_auc: stopper.best.unwrap_or(f64::NAN),
        step: best_step,
    };
    Ok(TrainOutcome { checkpoint: Checkpoint::from_params(&best, meta), history, log })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn early_stopping_counts() {
        let mut s = EarlyStopping::new(3);
        let mut evals = 0;
        for (e, m) in [0.9, 0.8, 0.7, 0.6, 0.5, 0.4].into_iter().enumerate() {
            evals += 1;
            s.observe(e, m);
            if s.should_stop() {
                break;
            }
        }
        assert_eq!(evals, 4);
        assert_eq!(s.best_epoch, Some(0));

        let mut s = EarlyStopping::new(2);
        assert!(s.observe(0, 0.5));
        assert!(!s.observe(1, 0.5));
        assert!(s.observe(2, 0.6));
        assert_eq!(s.bad_epochs, 0);
    }
}
