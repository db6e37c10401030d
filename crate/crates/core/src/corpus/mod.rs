//! Marketplace data model, record-file ingestion, the seeded synthetic
//! marketplace, and dataset blending/splitting.

mod io;
mod synth;
pub mod vocab;

use std::collections::{BTreeSet, HashMap, HashSet};

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use io::{
    load_engagements, load_judgments, load_listings, parse_engagements, parse_judgments,
    parse_listings, write_bundle, write_engagements, write_judgments, write_listings,
    BundlePaths, EngagementLog,
};
pub use synth::{generate_synthetic_corpus, SynthCorpusConfig};

/// Fixed "now" of the synthetic marketplace (2023-11-14T22:13:20Z).
pub const REFERENCE_TIME: i64 = 1_700_000_000;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}:{line}: {msg}")]
    Malformed { path: String, line: usize, msg: String },
    #[error("duplicate {kind} id `{id}`")]
    DuplicateId { kind: &'static str, id: String },
    #[error("grade {0} out of range (expected 0, 1 or 2)")]
    GradeRange(u8),
    #[error("label {0} out of range (expected 0 or 1)")]
    LabelRange(u8),
    #[error("{record} references unknown {kind} id `{id}`")]
    Integrity { record: &'static str, kind: &'static str, id: String },
    #[error("conflicting records for {kind} id `{id}`")]
    Conflict { kind: &'static str, id: String },
    #[error("insufficient {source_name} records: requested {requested}, available {available}")]
    Insufficient { source_name: &'static str, requested: usize, available: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
pub enum Provenance {
    #[default]
    #[serde(rename = "original")]
    Original,
    #[serde(rename = "synthetic-S1")]
    SyntheticS1,
    #[serde(rename = "synthetic-S2")]
    SyntheticS2,
    #[serde(rename = "synthetic-S3")]
    SyntheticS3,
}

impl Provenance {
    pub fn is_original(&self) -> bool {
        *self == Provenance::Original
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Listing {
    pub id: String,
    pub title: String,
    #[serde(default)]
    pub description: String,
    /// Minor currency units.
    pub price: u64,
    pub category: u32,
    pub country: u32,
    pub created_at: i64,
    #[serde(default)]
    pub image_vectors: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QueryRecord {
    pub id: String,
    pub text: String,
    pub country: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EngagementRecord {
    pub query_id: String,
    pub listing_id: String,
    /// 1 = engaged, 0 = shown but not engaged.
    pub label: u8,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Grade {
    OffTopic = 0,
    SomewhatRelevant = 1,
    Relevant = 2,
}

impl Grade {
    pub fn from_u8(v: u8) -> Result<Self, CorpusError> {
        match v {
            0 => Ok(Grade::OffTopic),
            1 => Ok(Grade::SomewhatRelevant),
            2 => Ok(Grade::Relevant),
            other => Err(CorpusError::GradeRange(other)),
        }
    }

    pub fn as_u8(self) -> u8 {
        self as u8
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RelevanceJudgment {
    pub query_id: String,
    pub listing_id: String,
    pub grade: Grade,
    pub provenance: Provenance,
}

/// Listings keyed by id, kept in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ListingSet {
    items: Vec<Listing>,
    index: HashMap<String, usize>,
}

impl ListingSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_vec(items: Vec<Listing>) -> Result<Self, CorpusError> {
        let mut set = Self::new();
        for l in items {
            set.insert(l)?;
        }
        Ok(set)
    }

    pub fn insert(&mut self, l: Listing) -> Result<(), CorpusError> {
        if self.index.contains_key(&l.id) {
            return Err(CorpusError::DuplicateId { kind: "listing", id: l.id });
        }
        self.index.insert(l.id.clone(), self.items.len());
        self.items.push(l);
        Ok(())
    }

    /// Inserts unless an identical listing with the same id exists.
    fn merge(&mut self, l: &Listing) -> Result<(), CorpusError> {
        match self.get(&l.id) {
            Some(existing) if existing == l => Ok(()),
            Some(_) => Err(CorpusError::Conflict { kind: "listing", id: l.id.clone() }),
            None => self.insert(l.clone()),
        }
    }

    pub fn get(&self, id: &str) -> Option<&Listing> {
        self.index.get(id).map(|&i| &self.items[i])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Listing> {
        self.items.iter()
    }

    pub fn as_slice(&self) -> &[Listing] {
        &self.items
    }
}

/// A self-consistent set of listings, queries, engagement pairs and
/// relevance judgments.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetBundle {
    pub listings: ListingSet,
    pub queries: Vec<QueryRecord>,
    pub engagements: Vec<EngagementRecord>,
    pub judgments: Vec<RelevanceJudgment>,
}

impl DatasetBundle {
    pub fn new(
        listings: ListingSet,
        queries: Vec<QueryRecord>,
        engagements: Vec<EngagementRecord>,
        judgments: Vec<RelevanceJudgment>,
    ) -> Result<Self, CorpusError> {
        let bundle = Self { listings, queries, engagements, judgments };
        bundle.check_integrity()?;
        Ok(bundle)
    }

    pub fn check_integrity(&self) -> Result<(), CorpusError> {
        let mut qids = HashSet::new();
        for q in &self.queries {
            if !qids.insert(q.id.as_str()) {
                return Err(CorpusError::DuplicateId { kind: "query", id: q.id.clone() });
            }
        }
        let refs = self
            .engagements
            .iter()
            .map(|e| ("engagement", &e.query_id, &e.listing_id))
            .chain(self.judgments.iter().map(|j| ("judgment", &j.query_id, &j.listing_id)));
        for (record, qid, lid) in refs {
            if !qids.contains(qid.as_str()) {
                return Err(CorpusError::Integrity { record, kind: "query", id: qid.clone() });
            }
            if !self.listings.contains(lid) {
                return Err(CorpusError::Integrity { record, kind: "listing", id: lid.clone() });
            }
        }
        Ok(())
    }

    pub fn query_map(&self) -> HashMap<&str, &QueryRecord> {
        self.queries.iter().map(|q| (q.id.as_str(), q)).collect()
    }

    pub fn provenance_counts(&self) -> HashMap<Provenance, usize> {
        let mut counts = HashMap::new();
        for e in &self.engagements {
            *counts.entry(e.provenance).or_insert(0) += 1;
        }
        counts
    }

    /// Keeps the given engagement records and everything they (and matching
    /// judgments) reference, preserving source order for listings/queries.
    pub fn restricted_to(&self, engagements: Vec<EngagementRecord>) -> DatasetBundle {
        let qids: HashSet<&str> = engagements.iter().map(|e| e.query_id.as_str()).collect();
        let pairs: HashSet<(&str, &str)> = engagements
            .iter()
            .map(|e| (e.query_id.as_str(), e.listing_id.as_str()))
            .collect();
        let lids: HashSet<&str> = engagements.iter().map(|e| e.listing_id.as_str()).collect();
        let judgments = self
            .judgments
            .iter()
            .filter(|j| pairs.contains(&(j.query_id.as_str(), j.listing_id.as_str())))
            .cloned()
            .collect();
        let listings = ListingSet::from_vec(
            self.listings.iter().filter(|l| lids.contains(l.id.as_str())).cloned().collect(),
        )
        .expect("source listing ids are unique");
        let queries = self.queries.iter().filter(|q| qids.contains(q.id.as_str())).cloned().collect();
        DatasetBundle { listings, queries, engagements, judgments }
    }
}

/// Seeded uniform sample (without replacement) of engagement records from
/// each source, shuffled together. Provenance tags are carried unchanged.
pub fn blend_datasets(
    original: &DatasetBundle,
    synthetic: &DatasetBundle,
    n_original: usize,
    n_synthetic: usize,
    seed: u64,
) -> Result<DatasetBundle, CorpusError> {
    for (name, src, n) in [("original", original, n_original), ("synthetic", synthetic, n_synthetic)] {
        if n > src.engagements.len() {
            return Err(CorpusError::Insufficient {
                source_name: name,
                requested: n,
                available: src.engagements.len(),
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pick = |src: &DatasetBundle, n: usize| -> Vec<EngagementRecord> {
        let mut idx = sample(&mut rng, src.engagements.len(), n).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| src.engagements[i].clone()).collect()
    };
    let ori = original.restricted_to(pick(original, n_original));
    let syn = synthetic.restricted_to(pick(synthetic, n_synthetic));

    let mut listings = ori.listings.clone();
    for l in syn.listings.iter() {
        listings.merge(l)?;
    }
    let mut queries = ori.queries.clone();
    let known: HashMap<String, QueryRecord> =
        queries.iter().map(|q| (q.id.clone(), q.clone())).collect();
    for q in &syn.queries {
        match known.get(&q.id) {
            Some(existing) if existing == q => {}
            Some(_) => return Err(CorpusError::Conflict { kind: "query", id: q.id.clone() }),
            None => queries.push(q.clone()),
        }
    }
    let mut engagements = ori.engagements;
    engagements.extend(syn.engagements);
    engagements.shuffle(&mut rng);
    let mut judgments = ori.judgments;
    judgments.extend(syn.judgments);
    DatasetBundle::new(listings, queries, engagements, judgments)
}

/// Seeded split by query id: no query appears in both halves. Listings are
/// shared (each half keeps the ones it references).
pub fn split_train_valid(
    bundle: &DatasetBundle,
    valid_fraction: f64,
    seed: u64,
) -> Result<(DatasetBundle, DatasetBundle), CorpusError> {
    if !(valid_fraction > 0.0 && valid_fraction < 1.0) {
        return Err(CorpusError::InvalidConfig(format!(
            "valid_fraction must lie in (0, 1), got {valid_fraction}"
        )));
    }
    let mut qids: Vec<&str> = bundle
        .engagements
        .iter()
        .map(|e| e.query_id.as_str())
        .chain(bundle.judgments.iter().map(|j| j.query_id.as_str()))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    qids.shuffle(&mut rng);
    let n_valid = (qids.len() as f64 * valid_fraction).round() as usize;
    let valid_ids: HashSet<&str> = qids[..n_valid].iter().copied().collect();

    let part = |want_valid: bool| -> DatasetBundle {
        let keep = |qid: &str| valid_ids.contains(qid) == want_valid;
        let engagements: Vec<_> =
            bundle.engagements.iter().filter(|e| keep(&e.query_id)).cloned().collect();
        let judgments: Vec<_> =
            bundle.judgments.iter().filter(|j| keep(&j.query_id)).cloned().collect();
        let lids: HashSet<&str> = engagements
            .iter()
            .map(|e| e.listing_id.as_str())
            .chain(judgments.iter().map(|j| j.listing_id.as_str()))
            .collect();
        let listings = ListingSet::from_vec(
            bundle.listings.iter().filter(|l| lids.contains(l.id.as_str())).cloned().collect(),
        )
        .expect("source listing ids are unique");
        let queries = bundle.queries.iter().filter(|q| keep(&q.id)).cloned().collect();
        DatasetBundle { listings, queries, engagements, judgments }
    };
    Ok((part(false), part(true)))
}
