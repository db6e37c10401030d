//! Relevance evaluation: label binarization, ROC AUC with a brute-force
//! oracle, point-biserial correlation, the relevance consistency ratio,
//! Distinct-2, BM25-L retrieval with reciprocal ranks, and whole-model
//! reports.

mod bm25;
mod ranking;

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bm25::{bm25l_score, build_bm25_index, mean, mrr, rank_and_rr, Bm25Index, Bm25Params, GeneratedQuery};
pub use ranking::{pbc, rcr, roc_auc, roc_auc_bruteforce};

use crate::corpus::{DatasetBundle, Grade, RelevanceJudgment};
use crate::features::{featurize_document, featurize_query, FeatureConfig, FeatureError, tokenize_words};
use crate::towers::{embed_document, embed_query, ModelError, ModelParams};

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("both label classes must be present")]
    SingleClass,
    #[error("label {0} is not binary")]
    LabelRange(u8),
    #[error("{0} scores but {1} labels")]
    LengthMismatch(usize, usize),
    #[error("scores must be finite")]
    NonFinite,
    #[error("scores have zero variance")]
    ZeroVariance,
    #[error("RCR needs at least one off-topic pair")]
    NoOffTopic,
    #[error("RCR denominator is zero: no relevant pair scores above the off-topic median")]
    ZeroDenominator,
    #[error("no text yields a word bigram")]
    NoBigrams,
    #[error("cannot index an empty corpus")]
    EmptyCorpus,
    #[error("unknown document id {0}")]
    UnknownDoc(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("nothing to evaluate")]
    Empty,
    #[error("judgment references unknown {kind} {id}")]
    Dangling { kind: &'static str, id: String },
    #[error("feature error: {0}")]
    Feature(String),
    #[error("model error: {0}")]
    Model(String),
}

impl From<FeatureError> for MetricError {
    fn from(e: FeatureError) -> Self {
        MetricError::Feature(e.to_string())
    }
}

impl From<ModelError> for MetricError {
    fn from(e: ModelError) -> Self {
        MetricError::Model(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LabelScheme {
    /// Relevant → 1; somewhat relevant and off-topic → 0.
    PbcO,
    /// Relevant and somewhat relevant → 1; off-topic → 0.
    PbcR,
}

pub fn binarize(grades: &[Grade], scheme: LabelScheme) -> Vec<u8> {
    grades
        .iter()
        .map(|g| match (scheme, g) {
            (_, Grade::Relevant) => 1,
            (LabelScheme::PbcR, Grade::SomewhatRelevant) => 1,
            _ => 0,
        })
        .collect()
}

/// Unique over total word bigrams, pooled across all texts.
pub fn distinct2<S: AsRef<str>>(texts: &[S]) -> Result<f64, MetricError> {
    let mut unique = HashSet::new();
    let mut total = 0usize;
    for t in texts {
        let words = tokenize_words(t.as_ref());
        for w in words.windows(2) {
            unique.insert((w[0].clone(), w[1].clone()));
            total += 1;
        }
    }
    if total == 0 {
        return Err(MetricError::NoBigrams);
    }
    Ok(unique.len() as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub mrr_top_k: usize,
    /// Reciprocal ranks beyond this rank count as 0; `None` ranks the full
    /// corpus.
    pub retrieval_cutoff: Option<usize>,
    pub bm25: Bm25Params,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { mrr_top_k: 5, retrieval_cutoff: None, bm25: Bm25Params::default() }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), MetricError> {
        if self.mrr_top_k == 0 {
            return Err(MetricError::InvalidParams("mrr_top_k must be at least 1".into()));
        }
        self.bm25.validate()
    }
}

/// Configuration echoed into every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub batch_size: usize,
    pub embed_dim: usize,
    pub scale: f64,
    pub lambda_relevance: f64,
    pub lambda_engagement: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradeCounts {
    pub off_topic: usize,
    pub somewhat_relevant: usize,
    pub relevant: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub pbc_o: f64,
    pub pbc_r: f64,
    pub rcr: f64,
    pub roc_auc: f64,
    pub distinct2: Option<f64>,
    pub mrr: Option<f64>,
    pub counts: GradeCounts,
    pub config: ConfigEcho,
}

impl MetricsReport {
    /// Computes the four relevance metrics from scored judgments.
    pub fn from_scored(scored: &[(f64, Grade)], config: ConfigEcho) -> Result<Self, MetricError> {
        if scored.is_empty() {
            return Err(MetricError::Empty);
        }
        let scores: Vec<f64> = scored.iter().map(|(s, _)| *s).collect();
        let grades: Vec<Grade> = scored.iter().map(|(_, g)| *g).collect();
        let labels_o = binarize(&grades, LabelScheme::PbcO);
        let labels_r = binarize(&grades, LabelScheme::PbcR);
        let count = |g: Grade| grades.iter().filter(|&&x| x == g).count();
        Ok(Self {
            pbc_o: pbc(&scores, &labels_o)?,
            pbc_r: pbc(&scores, &labels_r)?,
            rcr: rcr(scored)?,
            roc_auc: roc_auc(&scores, &labels_o)?,
            distinct2: None,
            mrr: None,
            counts: GradeCounts {
                off_topic: count(Grade::OffTopic),
                somewhat_relevant: count(Grade::SomewhatRelevant),
                relevant: count(Grade::Relevant),
            },
            config,
        })
    }

    pub fn tsv_header(&self) -> String {
        let mut cols = vec!["PBC-o", "PBC-r", "RCR", "ROC_AUC"];
        if self.distinct2.is_some() {
            cols.push("Distinct-2");
        }
        if self.mrr.is_some() {
            cols.push("MRR");
        }
        cols.join("\t")
    }

    pub fn tsv_row(&self) -> String {
        let mut vals = vec![self.pbc_o, self.pbc_r, self.rcr, self.roc_auc];
        vals.extend(self.distinct2);
        vals.extend(self.mrr);
        vals.iter().map(|v| format!("{v:.5}")).collect::<Vec<_>>().join("\t")
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}", self.tsv_header())?;
        write!(f, "{}", self.tsv_row())
    }
}

/// Cosine scores of every judgment pair under the model in eval mode, in
/// judgment order.
pub fn score_judgments(
    params: &ModelParams,
    features: &FeatureConfig,
    bundle: &DatasetBundle,
    judgments: &[RelevanceJudgment],
) -> Result<Vec<(f64, Grade)>, MetricError> {
    let queries = bundle.query_map();
    judgments
        .iter()
        .map(|j| {
            let q = queries
                .get(j.query_id.as_str())
                .ok_or_else(|| MetricError::Dangling { kind: "query", id: j.query_id.clone() })?;
            let l = bundle
                .listings
                .get(&j.listing_id)
                .ok_or_else(|| MetricError::Dangling { kind: "listing", id: j.listing_id.clone() })?;
            let qe = embed_query(&featurize_query(q, features)?, params, crate::towers::Mode::Eval)?;
            let de = embed_document(&featurize_document(l, features, features.reference_time)?, params)?;
            Ok((qe.iter().zip(&de).map(|(a, b)| a * b).sum(), j.grade))
        })
        .collect()
}

/// Embeds every judgment pair in eval mode and reports the relevance metrics.
pub fn evaluate_model(
    params: &ModelParams,
    features: &FeatureConfig,
    bundle: &DatasetBundle,
    config: ConfigEcho,
) -> Result<MetricsReport, MetricError> {
    let scored = score_judgments(params, features, bundle, &bundle.judgments)?;
    MetricsReport::from_scored(&scored, config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn echo() -> ConfigEcho {
        ConfigEcho { batch_size: 64, embed_dim: 64, scale: 20.0, lambda_relevance: 0.2, lambda_engagement: 0.8 }
    }

    #[test]
    fn binarize_schemes() {
        use Grade::*;
        assert_eq!(binarize(&[Relevant, SomewhatRelevant, OffTopic], LabelScheme::PbcO), vec![1, 0, 0]);
        assert_eq!(binarize(&[Relevant, SomewhatRelevant, OffTopic], LabelScheme::PbcR), vec![1, 1, 0]);
        assert_eq!(binarize(&[Relevant; 3], LabelScheme::PbcO), vec![1; 3]);
        assert_eq!(binarize(&[Relevant; 3], LabelScheme::PbcR), vec![1; 3]);
    }

    #[test]
    fn distinct2_examples() {
        assert!((distinct2(&["red sofa red sofa"]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(distinct2(&["red sofa"]).unwrap(), 1.0);
        assert_eq!(distinct2(&["sofa", ""]), Err(MetricError::NoBigrams));
        let texts = ["a red sofa", "blue chair for sale"];
        let doubled: Vec<&str> = texts.iter().chain(&texts).copied().collect();
        assert!(distinct2(&doubled).unwrap() <= distinct2(&texts).unwrap());
    }

    #[test]
    fn mrr_arithmetic_example() {
        assert!((mean(&[1.0, 0.5, 0.25, 1.0, 0.5]) - 0.65).abs() < 1e-15);
    }

    #[test]
    fn oracle_scores_report() {
        use Grade::*;
        let scored: Vec<(f64, Grade)> = [OffTopic, SomewhatRelevant, Relevant, OffTopic, Relevant, OffTopic, SomewhatRelevant]
            .iter()
            .map(|&g| (g.as_u8() as f64, g))
            .collect();
        let r = MetricsReport::from_scored(&scored, echo()).unwrap();
        assert_eq!(r.roc_auc, 1.0);
        assert!(r.pbc_o > 0.0 && r.pbc_r > 0.0);
        assert_eq!(r.counts.off_topic, 3);
        assert_eq!(r.config, echo());
        assert_eq!(r.tsv_header(), "PBC-o\tPBC-r\tRCR\tROC_AUC");
        assert!(r.to_string().starts_with("PBC-o\tPBC-r\tRCR\tROC_AUC\n"));
    }
}
