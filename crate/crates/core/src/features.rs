//! Deterministic text featurization shared by the query and document towers.
//!
//! Text is lowercased and whitespace-collapsed, then cut into character
//! trigrams (spanning word boundaries) and word tokens. Both token streams are
//! hashed with 64-bit FNV-1a and masked into power-of-two bucket ranges, so
//! feature ids are identical on every platform.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Listing, QueryRecord};

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("text is empty after normalization")]
    EmptyText,
    #[error("cannot hash an empty token")]
    EmptyToken,
    #[error("bucket count {0} is not a positive power of two")]
    BadBuckets(usize),
    #[error("invalid feature config: {0}")]
    InvalidConfig(String),
    #[error("{what} id {id} out of range (size {size})")]
    IdOutOfRange { what: &'static str, id: u32, size: usize },
    #[error("image vector has dimension {got}, expected {expected}")]
    ImageDim { got: usize, expected: usize },
    #[error("non-finite context feature for listing {0}")]
    NonFinite(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub trigram_buckets: usize,
    pub word_buckets: usize,
    pub country_vocab_size: usize,
    pub image_dim: usize,
    /// Width of the raw context vector: log-price, category one-hot
    /// (`context_dim_out - 2` slots, category ids folded modulo), age in days.
    pub context_dim_out: usize,
    /// Unix seconds used as "now" when computing listing age.
    pub reference_time: i64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            trigram_buckets: 1 << 16,
            word_buckets: 1 << 15,
            country_vocab_size: 64,
            image_dim: 32,
            context_dim_out: 16,
            reference_time: crate::corpus::REFERENCE_TIME,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<(), FeatureError> {
        for b in [self.trigram_buckets, self.word_buckets] {
            if !b.is_power_of_two() {
                return Err(FeatureError::BadBuckets(b));
            }
        }
        if self.country_vocab_size == 0 || self.image_dim == 0 {
            return Err(FeatureError::InvalidConfig(
                "country_vocab_size and image_dim must be positive".into(),
            ));
        }
        if self.context_dim_out < 3 {
            return Err(FeatureError::InvalidConfig(
                "context_dim_out must be at least 3".into(),
            ));
        }
        Ok(())
    }

    pub fn category_slots(&self) -> usize {
        self.context_dim_out - 2
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryFeatures {
    pub trigram_ids: Vec<u32>,
    pub word_ids: Vec<u32>,
    pub country_id: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DocumentFeatures {
    pub trigram_ids: Vec<u32>,
    pub word_ids: Vec<u32>,
    pub context_raw: Vec<f64>,
    pub image_vectors: Vec<Vec<f64>>,
}

/// Lowercase and collapse every whitespace run to a single space.
pub fn normalize(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Sliding three-character windows over the normalized text. Strings shorter
/// than three characters yield themselves as the only token.
pub fn char_trigrams(text: &str) -> Result<Vec<String>, FeatureError> {
    let norm = normalize(text);
    if norm.is_empty() {
        return Err(FeatureError::EmptyText);
    }
    let chars: Vec<char> = norm.chars().collect();
    if chars.len() < 3 {
        return Ok(vec![norm]);
    }
    Ok(chars.windows(3).map(|w| w.iter().collect()).collect())
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

pub fn hash_token(token: &str, buckets: usize) -> Result<u32, FeatureError> {
    if token.is_empty() {
        return Err(FeatureError::EmptyToken);
    }
    if !buckets.is_power_of_two() || buckets > (1usize << 32) {
        return Err(FeatureError::BadBuckets(buckets));
    }
    Ok((fnv1a64(token.as_bytes()) & (buckets as u64 - 1)) as u32)
}

/// Lowercase and split on any run of non-alphanumeric characters.
pub fn tokenize_words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

fn hashed(tokens: &[String], buckets: usize) -> Result<Vec<u32>, FeatureError> {
    tokens.iter().map(|t| hash_token(t, buckets)).collect()
}

fn check_country(country: u32, cfg: &FeatureConfig) -> Result<u32, FeatureError> {
    if country as usize >= cfg.country_vocab_size {
        return Err(FeatureError::IdOutOfRange {
            what: "country",
            id: country,
            size: cfg.country_vocab_size,
        });
    }
    Ok(country)
}

pub fn featurize_query(q: &QueryRecord, cfg: &FeatureConfig) -> Result<QueryFeatures, FeatureError> {
    Ok(QueryFeatures {
        trigram_ids: hashed(&char_trigrams(&q.text)?, cfg.trigram_buckets)?,
        word_ids: hashed(&tokenize_words(&q.text), cfg.word_buckets)?,
        country_id: check_country(q.country, cfg)?,
    })
}

/// Raw context vector `(ln(1+price), one-hot(category), age_days)`.
pub fn context_features(l: &Listing, cfg: &FeatureConfig, now: i64) -> Result<Vec<f64>, FeatureError> {
    let slots = cfg.category_slots();
    let mut ctx = vec![0.0; cfg.context_dim_out];
    ctx[0] = (l.price as f64).ln_1p();
    ctx[1 + (l.category as usize % slots)] = 1.0;
    ctx[slots + 1] = (now - l.created_at) as f64 / 86_400.0;
    if ctx.iter().any(|v| !v.is_finite()) {
        return Err(FeatureError::NonFinite(l.id.clone()));
    }
    Ok(ctx)
}

pub fn featurize_document(
    l: &Listing,
    cfg: &FeatureConfig,
    now: i64,
) -> Result<DocumentFeatures, FeatureError> {
    let text = if l.description.trim().is_empty() {
        l.title.clone()
    } else {
        format!("{} {}", l.title, l.description)
    };
    for v in &l.image_vectors {
        if v.len() != cfg.image_dim {
            return Err(FeatureError::ImageDim { got: v.len(), expected: cfg.image_dim });
        }
    }
    Ok(DocumentFeatures {
        trigram_ids: hashed(&char_trigrams(&text)?, cfg.trigram_buckets)?,
        word_ids: hashed(&tokenize_words(&text), cfg.word_buckets)?,
        context_raw: context_features(l, cfg, now)?,
        image_vectors: l.image_vectors.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn listing(price: u64, created_at: i64) -> Listing {
        Listing {
            id: "l1".into(),
            title: "Oak table".into(),
            description: "solid wood".into(),
            price,
            category: 3,
            country: 0,
            created_at,
            image_vectors: vec![],
        }
    }

    #[test]
    fn trigram_examples() {
        assert_eq!(char_trigrams("sofa").unwrap(), vec!["sof", "ofa"]);
        assert_eq!(
            char_trigrams("Red  Car").unwrap(),
            vec!["red", "ed ", "d c", " ca", "car"]
        );
        assert_eq!(char_trigrams("ab").unwrap(), vec!["ab"]);
        assert_eq!(char_trigrams("  \t "), Err(FeatureError::EmptyText));
    }

    #[test]
    fn word_tokens() {
        assert_eq!(tokenize_words("Wooden chair, oak!"), vec!["wooden", "chair", "oak"]);
        assert!(tokenize_words("").is_empty());
        assert_eq!(tokenize_words("29.5\" table"), vec!["29", "5", "table"]);
    }

    #[test]
    fn hash_rejects_bad_input() {
        assert_eq!(hash_token("", 16), Err(FeatureError::EmptyToken));
        assert_eq!(hash_token("abc", 12), Err(FeatureError::BadBuckets(12)));
        assert_eq!(hash_token("abc", 16).unwrap(), hash_token("abc", 16).unwrap());
    }

    #[test]
    fn context_vector_layout() {
        let cfg = FeatureConfig::default();
        let now = 1_000_000;
        let ctx = context_features(&listing(0, now - 2 * 86_400), &cfg, now).unwrap();
        assert_eq!(ctx.len(), 16);
        assert_eq!(ctx[0], 0.0);
        assert_eq!(ctx[4], 1.0);
        assert_eq!(ctx[15], 2.0);
        assert_eq!(ctx.iter().filter(|&&v| v == 1.0).count(), 1);
    }

    #[test]
    fn listings_differing_in_age_only() {
        let cfg = FeatureConfig::default();
        let a = featurize_document(&listing(500, 100), &cfg, 1_000_000).unwrap();
        let b = featurize_document(&listing(500, 86_500), &cfg, 1_000_000).unwrap();
        assert_eq!(a.trigram_ids, b.trigram_ids);
        assert_eq!(a.word_ids, b.word_ids);
        assert_eq!(a.context_raw[..15], b.context_raw[..15]);
        assert!((a.context_raw[15] - b.context_raw[15] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn query_country_out_of_range() {
        let cfg = FeatureConfig { country_vocab_size: 4, ..Default::default() };
        let q = QueryRecord { id: "q".into(), text: "sofa".into(), country: 4 };
        assert!(matches!(featurize_query(&q, &cfg), Err(FeatureError::IdOutOfRange { .. })));
        let q = QueryRecord { country: 1, ..q };
        let f = featurize_query(&q, &cfg).unwrap();
        assert_eq!(f.trigram_ids.len(), 2);
        assert_eq!(f.word_ids.len(), 1);
    }
}
