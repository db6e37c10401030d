//! Runs a strategy over every listing of a bundle and packages the output as
//! provenance-tagged corpus records.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use super::{
    check_count, enhance_listing, generate_queries, generate_s3, Backend, EnhancedListing, Strategy, SynthError,
    SyntheticQuery, TemplateId,
};
use crate::corpus::{CorpusError, DatasetBundle, EngagementRecord, Listing, ListingSet, QueryRecord};

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentFailure {
    pub listing_id: String,
    pub error: String,
    /// The failure came from the remote backend (as opposed to the listing).
    pub remote: bool,
}

#[derive(Debug, Clone)]
pub struct AugmentOutput {
    pub strategy: Strategy,
    /// Synthetic records: generated queries paired (label 1) with their
    /// parent listing for S1/S3; original engagements re-pointed at the
    /// enhanced listings for S2.
    pub bundle: DatasetBundle,
    pub queries: Vec<SyntheticQuery>,
    pub enhanced: Vec<EnhancedListing>,
    pub failures: Vec<AugmentFailure>,
}

type PerListing = Result<(Option<EnhancedListing>, Vec<SyntheticQuery>), SynthError>;

fn run_one(listing: &Listing, strategy: Strategy, backend: &Backend, template: TemplateId, n: usize) -> PerListing {
    match strategy {
        Strategy::S1 => Ok((None, generate_queries(listing, backend, template, n)?)),
        Strategy::S2 => Ok((Some(enhance_listing(listing, backend)?), Vec::new())),
        Strategy::S3 => {
            let (e, q) = generate_s3(listing, backend, template, n)?;
            Ok((Some(e), q))
        }
    }
}

/// Results in listing order regardless of completion order. Remote backends
/// run up to `max_in_flight` listings concurrently.
fn run_all(listings: &[Listing], strategy: Strategy, backend: &Backend, template: TemplateId, n: usize) -> Vec<PerListing> {
    let workers = match backend {
        Backend::Deterministic { .. } => 1,
        Backend::Remote(c) => c.config().max_in_flight.min(listings.len()).max(1),
    };
    if workers == 1 {
        return listings.iter().map(|l| run_one(l, strategy, backend, template, n)).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<PerListing>>> = listings.iter().map(|_| Mutex::new(None)).collect();
    thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= listings.len() {
                    break;
                }
                *slots[i].lock().unwrap() = Some(run_one(&listings[i], strategy, backend, template, n));
            });
        }
    });
    slots.into_iter().map(|m| m.into_inner().unwrap().expect("every slot filled")).collect()
}

/// Applies `strategy` to every listing of `source`. Per-listing failures are
/// collected rather than aborting the run.
pub fn augment(
    source: &DatasetBundle,
    strategy: Strategy,
    backend: &Backend,
    template: TemplateId,
    n: usize,
) -> Result<AugmentOutput, SynthError> {
    if strategy != Strategy::S2 {
        check_count(n)?;
    }
    let listings = source.listings.as_slice();
    let results = run_all(listings, strategy, backend, template, n);

    let mut queries = Vec::new();
    let mut enhanced = Vec::new();
    let mut failures = Vec::new();
    let mut out_listings = Vec::new();
    for (listing, r) in listings.iter().zip(results) {
        match r {
            Ok((e, qs)) => {
                match &e {
                    Some(e) => out_listings.push(e.to_listing(listing)),
                    None => out_listings.push(listing.clone()),
                }
                enhanced.extend(e);
                queries.extend(qs);
            }
            Err(err) => failures.push(AugmentFailure {
                listing_id: listing.id.clone(),
                remote: err.is_remote(),
                error: err.to_string(),
            }),
        }
    }
    let bundle = to_bundle(source, strategy, out_listings, &queries, &enhanced).map_err(|e| {
        // Record construction only fails on internal id collisions.
        SynthError::Remote(super::RemoteError::BadResponse(e.to_string()))
    })?;
    Ok(AugmentOutput { strategy, bundle, queries, enhanced, failures })
}

fn to_bundle(
    source: &DatasetBundle,
    strategy: Strategy,
    listings: Vec<Listing>,
    queries: &[SyntheticQuery],
    enhanced: &[EnhancedListing],
) -> Result<DatasetBundle, CorpusError> {
    let provenance = strategy.provenance();
    let set = ListingSet::from_vec(listings)?;
    let (records, engagements) = match strategy {
        Strategy::S1 | Strategy::S3 => {
            let mut records = Vec::with_capacity(queries.len());
            let mut engagements = Vec::with_capacity(queries.len());
            for q in queries {
                let parent = set.get(&q.parent_listing_id).expect("parent listing kept");
                let id = format!("{}:{}:{}", strategy.tag(), q.parent_listing_id, q.ordinal);
                records.push(QueryRecord { id: id.clone(), text: q.text.clone(), country: parent.country });
                engagements.push(EngagementRecord {
                    query_id: id,
                    listing_id: q.parent_listing_id.clone(),
                    label: 1,
                    provenance,
                });
            }
            (records, engagements)
        }
        Strategy::S2 => {
            let parents: std::collections::HashMap<&str, String> =
                enhanced.iter().map(|e| (e.parent_listing_id.as_str(), e.listing_id())).collect();
            let engagements: Vec<EngagementRecord> = source
                .engagements
                .iter()
                .filter_map(|e| {
                    parents.get(e.listing_id.as_str()).map(|lid| EngagementRecord {
                        query_id: e.query_id.clone(),
                        listing_id: lid.clone(),
                        label: e.label,
                        provenance,
                    })
                })
                .collect();
            let used: std::collections::HashSet<&str> = engagements.iter().map(|e| e.query_id.as_str()).collect();
            let records = source.queries.iter().filter(|q| used.contains(q.id.as_str())).cloned().collect();
            (records, engagements)
        }
    };
    DatasetBundle::new(set, records, engagements, Vec::new())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_corpus, Provenance, SynthCorpusConfig};

    fn corpus() -> DatasetBundle {
        generate_synthetic_corpus(&SynthCorpusConfig { n_listings: 40, ..Default::default() }).unwrap()
    }

    #[test]
    fn strategies_produce_tagged_records() {
        let src = corpus();
        let b = Backend::Deterministic { seed: 1 };
        let s1 = augment(&src, Strategy::S1, &b, TemplateId::T2Detailed, 10).unwrap();
        assert!(s1.failures.is_empty());
        assert!(s1.bundle.engagements.iter().all(|e| e.label == 1 && e.provenance == Provenance::SyntheticS1));
        let per_listing = s1.queries.iter().filter(|q| q.parent_listing_id == "l00000").count();
        assert!((1..=10).contains(&per_listing));

        let s2 = augment(&src, Strategy::S2, &b, TemplateId::T2Detailed, 10).unwrap();
        assert_eq!(s2.enhanced.len(), 40);
        assert_eq!(s2.bundle.engagements.len(), src.engagements.len());
        assert!(s2.bundle.listings.iter().all(|l| l.id.ends_with("~s2")));

        let s3 = augment(&src, Strategy::S3, &b, TemplateId::T2Detailed, 5).unwrap();
        assert_eq!(s3.enhanced.len(), 40);
        assert!(s3.bundle.engagements.iter().all(|e| e.provenance == Provenance::SyntheticS3 && e.listing_id.ends_with("~s3")));
        assert!(matches!(augment(&src, Strategy::S1, &b, TemplateId::T1Basic, 11), Err(SynthError::QueryCount(11))));
    }
}
