//! BM25-L lexical retrieval over listing title + description, used to check
//! that generated queries retrieve the listing they came from.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::MetricError;
use crate::corpus::Listing;
use crate::features::tokenize_words;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
    pub delta: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.5, b: 0.75, delta: 0.5 }
    }
}

impl Bm25Params {
    pub fn validate(&self) -> Result<(), MetricError> {
        if self.k1 > 0.0 && (0.0..=1.0).contains(&self.b) && self.delta >= 0.0 {
            Ok(())
        } else {
            Err(MetricError::InvalidParams(format!("{self:?}")))
        }
    }
}

#[derive(Debug, Clone)]
pub struct Bm25Index {
    doc_ids: Vec<String>,
    position: HashMap<String, usize>,
    term_freqs: Vec<HashMap<String, u32>>,
    doc_lens: Vec<usize>,
    doc_freq: HashMap<String, usize>,
    postings: HashMap<String, Vec<usize>>,
    avgdl: f64,
}

impl Bm25Index {
    pub fn build(listings: &[Listing]) -> Result<Self, MetricError> {
        if listings.is_empty() {
            return Err(MetricError::EmptyCorpus);
        }
        let mut idx = Bm25Index {
            doc_ids: Vec::with_capacity(listings.len()),
            position: HashMap::new(),
            term_freqs: Vec::with_capacity(listings.len()),
            doc_lens: Vec::with_capacity(listings.len()),
            doc_freq: HashMap::new(),
            postings: HashMap::new(),
            avgdl: 0.0,
        };
        for (i, l) in listings.iter().enumerate() {
            let tokens = tokenize_words(&format!("{} {}", l.title, l.description));
            let mut tf: HashMap<String, u32> = HashMap::new();
            for t in &tokens {
                *tf.entry(t.clone()).or_insert(0) += 1;
            }
            for t in tf.keys() {
                *idx.doc_freq.entry(t.clone()).or_insert(0) += 1;
                idx.postings.entry(t.clone()).or_default().push(i);
            }
            idx.position.insert(l.id.clone(), i);
            idx.doc_ids.push(l.id.clone());
            idx.doc_lens.push(tokens.len());
            idx.term_freqs.push(tf);
        }
        idx.avgdl = idx.doc_lens.iter().sum::<usize>() as f64 / listings.len() as f64;
        Ok(idx)
    }

    pub fn num_docs(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn avgdl(&self) -> f64 {
        self.avgdl
    }

    pub fn doc_len(&self, doc_id: &str) -> Option<usize> {
        self.position.get(doc_id).map(|&i| self.doc_lens[i])
    }

    pub fn doc_freq(&self, term: &str) -> usize {
        self.doc_freq.get(term).copied().unwrap_or(0)
    }

    pub fn idf(&self, term: &str) -> f64 {
        ((self.num_docs() as f64 + 1.0) / (self.doc_freq(term) as f64 + 0.5)).ln()
    }

    fn score_at(&self, params: &Bm25Params, terms: &[String], doc: usize) -> f64 {
        let norm = 1.0 - params.b + params.b * self.doc_lens[doc] as f64 / self.avgdl;
        terms
            .iter()
            .filter_map(|t| self.term_freqs[doc].get(t).map(|&tf| (t, tf)))
            .map(|(t, tf)| {
                let c = tf as f64 / norm + params.delta;
                self.idf(t) * (params.k1 + 1.0) * c / (params.k1 + c)
            })
            .sum()
    }

    /// All documents ranked by descending score, ties by ascending doc id.
    pub fn rank(&self, params: &Bm25Params, query: &str) -> Vec<(String, f64)> {
        let terms = distinct_terms(query);
        let mut candidates: HashSet<usize> = HashSet::new();
        for t in &terms {
            if let Some(p) = self.postings.get(t) {
                candidates.extend(p);
            }
        }
        let mut scored: Vec<(usize, f64)> = (0..self.num_docs())
            .map(|d| (d, if candidates.contains(&d) { self.score_at(params, &terms, d) } else { 0.0 }))
            .collect();
        scored.sort_by(|a, b| match b.1.total_cmp(&a.1) {
            Ordering::Equal => self.doc_ids[a.0].cmp(&self.doc_ids[b.0]),
            o => o,
        });
        scored.into_iter().map(|(d, s)| (self.doc_ids[d].clone(), s)).collect()
    }
}

fn distinct_terms(query: &str) -> Vec<String> {
    let mut seen = HashSet::new();
    tokenize_words(query).into_iter().filter(|t| seen.insert(t.clone())).collect()
}

pub fn build_bm25_index(listings: &[Listing]) -> Result<Bm25Index, MetricError> {
    Bm25Index::build(listings)
}

/// BM25-L score of one document; duplicate query terms count once.
pub fn bm25l_score(index: &Bm25Index, params: &Bm25Params, query: &str, doc_id: &str) -> Result<f64, MetricError> {
    let &doc = index.position.get(doc_id).ok_or_else(|| MetricError::UnknownDoc(doc_id.to_owned()))?;
    Ok(index.score_at(params, &distinct_terms(query), doc))
}

/// Reciprocal rank of `target` in the full ranking; 0 when it falls below
/// `cutoff`.
pub fn rank_and_rr(
    index: &Bm25Index,
    params: &Bm25Params,
    query: &str,
    target: &str,
    cutoff: Option<usize>,
) -> Result<f64, MetricError> {
    if !index.position.contains_key(target) {
        return Err(MetricError::UnknownDoc(target.to_owned()));
    }
    let rank = index.rank(params, query).iter().position(|(id, _)| id == target).unwrap() + 1;
    Ok(match cutoff {
        Some(k) if rank > k => 0.0,
        _ => 1.0 / rank as f64,
    })
}

/// A generated query with its parent listing and generation ordinal (1-based).
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedQuery {
    pub listing_id: String,
    pub text: String,
    pub ordinal: u32,
}

/// Mean reciprocal rank over every listing's first `k` queries by ordinal.
pub fn mrr(
    queries: &[GeneratedQuery],
    k: usize,
    index: &Bm25Index,
    params: &Bm25Params,
    cutoff: Option<usize>,
) -> Result<f64, MetricError> {
    if k == 0 {
        return Err(MetricError::InvalidParams("top-K must be at least 1".into()));
    }
    let mut grouped: BTreeMap<&str, Vec<&GeneratedQuery>> = BTreeMap::new();
    for q in queries {
        grouped.entry(q.listing_id.as_str()).or_default().push(q);
    }
    if grouped.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut rrs = Vec::new();
    for (listing, mut qs) in grouped {
        qs.sort_by_key(|q| q.ordinal);
        for q in qs.into_iter().take(k) {
            rrs.push(rank_and_rr(index, params, &q.text, listing, cutoff)?);
        }
    }
    Ok(mean(&rrs))
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(id: &str, title: &str) -> Listing {
        Listing {
            id: id.into(),
            title: title.into(),
            description: String::new(),
            price: 0,
            category: 0,
            country: 0,
            created_at: 0,
            image_vectors: vec![],
        }
    }

    #[test]
    fn index_statistics() {
        assert!(matches!(Bm25Index::build(&[]), Err(MetricError::EmptyCorpus)));
        let idx = Bm25Index::build(&[doc("a", "lamp"), doc("b", "chair")]).unwrap();
        assert_eq!(idx.doc_freq("lamp"), 1);
        assert_eq!(idx.doc_freq("chair"), 1);
        let idx = Bm25Index::build(&[doc("a", "red lamp"), doc("b", "chair"), doc("c", "a b c d")]).unwrap();
        assert!((idx.avgdl() - 7.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn hand_computed_score() {
        let idx = Bm25Index::build(&[doc("1", "vintage lamp"), doc("2", "wooden chair")]).unwrap();
        let p = Bm25Params::default();
        let got = bm25l_score(&idx, &p, "lamp", "1").unwrap();
        let idf = (3.0f64 / 1.5).ln();
        assert!((got - idf * (2.5 * 1.5) / 3.0).abs() < 1e-15);
        assert!((got - 0.86643).abs() < 1e-5);
        assert_eq!(bm25l_score(&idx, &p, "lamp", "2").unwrap(), 0.0);
        assert_eq!(bm25l_score(&idx, &p, "lamp lamp", "1").unwrap(), got);
    }

    #[test]
    fn reciprocal_ranks() {
        let docs: Vec<Listing> = (0..12).map(|i| doc(&format!("d{i:02}"), &format!("item x{i}"))).collect();
        let idx = Bm25Index::build(&docs).unwrap();
        let p = Bm25Params::default();
        assert_eq!(rank_and_rr(&idx, &p, "x3", "d03", None).unwrap(), 1.0);
        // "item" ties every doc; ascending id order puts d03 fourth.
        assert_eq!(rank_and_rr(&idx, &p, "item", "d03", None).unwrap(), 0.25);
        assert_eq!(rank_and_rr(&idx, &p, "item", "d11", Some(10)).unwrap(), 0.0);
        assert!((rank_and_rr(&idx, &p, "item", "d11", None).unwrap() - 1.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn mrr_uses_first_k_by_ordinal() {
        let docs = vec![doc("a", "red lamp"), doc("b", "blue chair")];
        let idx = Bm25Index::build(&docs).unwrap();
        let q = |l: &str, t: &str, o| GeneratedQuery { listing_id: l.into(), text: t.into(), ordinal: o };
        let qs = vec![q("a", "blue", 3), q("a", "red", 1), q("b", "chair", 1)];
        assert_eq!(mrr(&qs, 1, &idx, &Bm25Params::default(), None).unwrap(), 1.0);
        assert_eq!(mrr(&qs, 5, &idx, &Bm25Params::default(), None).unwrap(), (1.0 + 0.5 + 1.0) / 3.0);
    }
}
