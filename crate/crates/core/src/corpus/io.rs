//! Line-delimited record files. Every non-blank line is one JSON object.
//!
//! listings:    {"id","title","description","price","category","country","created_at","image_vectors"}
//! engagements: {"query_id","listing_id","query_text","country","label"[,"provenance"]}
//! judgments:   {"query_id","listing_id","grade"[,"provenance"]}

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    CorpusError, DatasetBundle, EngagementRecord, Grade, Listing, ListingSet, Provenance,
    QueryRecord, RelevanceJudgment,
};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EngagementLine {
    query_id: String,
    listing_id: String,
    query_text: String,
    country: u32,
    label: u8,
    #[serde(default, skip_serializing_if = "Provenance::is_original")]
    provenance: Provenance,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JudgmentLine {
    query_id: String,
    listing_id: String,
    grade: u8,
    #[serde(default, skip_serializing_if = "Provenance::is_original")]
    provenance: Provenance,
}

/// Queries and engagement pairs recovered from an engagements file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EngagementLog {
    pub queries: Vec<QueryRecord>,
    pub engagements: Vec<EngagementRecord>,
}

fn read(path: &Path) -> Result<String, CorpusError> {
    fs::read_to_string(path)
        .map_err(|source| CorpusError::Io { path: path.display().to_string(), source })
}

fn lines<'a, T: Deserialize<'a>>(
    text: &'a str,
    origin: &'a str,
) -> impl Iterator<Item = Result<(usize, T), CorpusError>> + 'a {
    text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()).map(move |(i, l)| {
        serde_json::from_str(l).map(|v| (i + 1, v)).map_err(|e| CorpusError::Malformed {
            path: origin.to_owned(),
            line: i + 1,
            msg: e.to_string(),
        })
    })
}

fn malformed(origin: &str, line: usize, msg: impl Into<String>) -> CorpusError {
    CorpusError::Malformed { path: origin.to_owned(), line, msg: msg.into() }
}

pub fn parse_listings(text: &str, origin: &str) -> Result<ListingSet, CorpusError> {
    let mut set = ListingSet::new();
    for rec in lines::<Listing>(text, origin) {
        let (line, l) = rec?;
        if l.title.trim().is_empty() {
            return Err(malformed(origin, line, format!("listing `{}` has an empty title", l.id)));
        }
        if let Some(dim) = l.image_vectors.first().map(Vec::len) {
            if l.image_vectors.iter().any(|v| v.len() != dim) {
                return Err(malformed(origin, line, "image vectors differ in dimension"));
            }
        }
        set.insert(l)?;
    }
    Ok(set)
}

pub fn parse_engagements(text: &str, origin: &str) -> Result<EngagementLog, CorpusError> {
    let mut log = EngagementLog::default();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for rec in lines::<EngagementLine>(text, origin) {
        let (line, e) = rec?;
        if e.label > 1 {
            return Err(CorpusError::LabelRange(e.label));
        }
        if e.query_text.trim().is_empty() {
            return Err(malformed(origin, line, format!("query `{}` has empty text", e.query_id)));
        }
        match seen.get(&e.query_id) {
            Some(&i) => {
                let q = &log.queries[i];
                if q.text != e.query_text || q.country != e.country {
                    return Err(CorpusError::Conflict { kind: "query", id: e.query_id });
                }
            }
            None => {
                seen.insert(e.query_id.clone(), log.queries.len());
                log.queries.push(QueryRecord {
                    id: e.query_id.clone(),
                    text: e.query_text,
                    country: e.country,
                });
            }
        }
        log.engagements.push(EngagementRecord {
            query_id: e.query_id,
            listing_id: e.listing_id,
            label: e.label,
            provenance: e.provenance,
        });
    }
    Ok(log)
}

pub fn parse_judgments(text: &str, origin: &str) -> Result<Vec<RelevanceJudgment>, CorpusError> {
    lines::<JudgmentLine>(text, origin)
        .map(|rec| {
            let (_, j) = rec?;
            Ok(RelevanceJudgment {
                query_id: j.query_id,
                listing_id: j.listing_id,
                grade: Grade::from_u8(j.grade)?,
                provenance: j.provenance,
            })
        })
        .collect()
}

pub fn load_listings(path: &Path) -> Result<ListingSet, CorpusError> {
    parse_listings(&read(path)?, &path.display().to_string())
}

pub fn load_engagements(path: &Path) -> Result<EngagementLog, CorpusError> {
    parse_engagements(&read(path)?, &path.display().to_string())
}

pub fn load_judgments(path: &Path) -> Result<Vec<RelevanceJudgment>, CorpusError> {
    parse_judgments(&read(path)?, &path.display().to_string())
}

fn to_line<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string(v).expect("record types serialize infallibly");
    s.push('\n');
    s
}

pub fn write_listings<'a>(listings: impl IntoIterator<Item = &'a Listing>) -> String {
    listings.into_iter().map(to_line).collect()
}

pub fn write_engagements(bundle: &DatasetBundle) -> String {
    let queries = bundle.query_map();
    bundle
        .engagements
        .iter()
        .map(|e| {
            let q = queries[e.query_id.as_str()];
            to_line(&EngagementLine {
                query_id: e.query_id.clone(),
                listing_id: e.listing_id.clone(),
                query_text: q.text.clone(),
                country: q.country,
                label: e.label,
                provenance: e.provenance,
            })
        })
        .collect()
}

pub fn write_judgments(judgments: &[RelevanceJudgment]) -> String {
    judgments
        .iter()
        .map(|j| {
            to_line(&JudgmentLine {
                query_id: j.query_id.clone(),
                listing_id: j.listing_id.clone(),
                grade: j.grade.as_u8(),
                provenance: j.provenance,
            })
        })
        .collect()
}

/// File locations of one bundle: `<dir>/<prefix>listings.jsonl` etc.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BundlePaths {
    pub listings: PathBuf,
    pub engagements: PathBuf,
    pub judgments: PathBuf,
}

impl BundlePaths {
    pub fn in_dir(dir: &Path, prefix: &str) -> Self {
        Self {
            listings: dir.join(format!("{prefix}listings.jsonl")),
            engagements: dir.join(format!("{prefix}engagements.jsonl")),
            judgments: dir.join(format!("{prefix}judgments.jsonl")),
        }
    }

    /// Loads all three files (a missing judgments file counts as empty) and
    /// checks referential integrity.
    pub fn load(&self) -> Result<DatasetBundle, CorpusError> {
        let listings = load_listings(&self.listings)?;
        let log = load_engagements(&self.engagements)?;
        let judgments =
            if self.judgments.exists() { load_judgments(&self.judgments)? } else { Vec::new() };
        DatasetBundle::new(listings, log.queries, log.engagements, judgments)
    }
}

pub fn write_bundle(bundle: &DatasetBundle, paths: &BundlePaths) -> Result<(), CorpusError> {
    let io = |p: &Path, body: String| {
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir)
                .map_err(|source| CorpusError::Io { path: dir.display().to_string(), source })?;
        }
        fs::write(p, body).map_err(|source| CorpusError::Io { path: p.display().to_string(), source })
    };
    io(&paths.listings, write_listings(bundle.listings.iter()))?;
    io(&paths.engagements, write_engagements(bundle))?;
    io(&paths.judgments, write_judgments(&bundle.judgments))
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO: &str = r#"{"id":"a","title":"Oak chair","description":"","price":1200,"category":1,"country":0,"created_at":1600000000,"image_vectors":[[0.5,1.0]]}
{"id":"b","title":"Lamp","price":0,"category":9,"country":2,"created_at":1650000000}
"#;

    #[test]
    fn listings_parse_and_reject_duplicates() {
        let set = parse_listings(TWO, "t").unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.get("a").unwrap().image_vectors, vec![vec![0.5, 1.0]]);

        let dup = format!("{TWO}{}", TWO.lines().next().unwrap());
        let err = parse_listings(&dup, "t").unwrap_err();
        assert!(err.to_string().contains("`a`"), "{err}");

        assert!(parse_listings("", "t").unwrap().is_empty());
    }

    #[test]
    fn malformed_line_number_is_reported() {
        let bad = format!("{TWO}\n{{\"id\": 3}}\n");
        match parse_listings(&bad, "x.jsonl").unwrap_err() {
            CorpusError::Malformed { line, path, .. } => {
                assert_eq!(line, 4);
                assert_eq!(path, "x.jsonl");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn judgment_grades() {
        let ok = parse_judgments(r#"{"query_id":"q","listing_id":"a","grade":2}"#, "j").unwrap();
        assert_eq!(ok[0].grade, Grade::Relevant);
        let err = parse_judgments(r#"{"query_id":"q","listing_id":"a","grade":3}"#, "j").unwrap_err();
        assert!(matches!(err, CorpusError::GradeRange(3)));
    }

    #[test]
    fn engagements_collect_queries() {
        let text = r#"{"query_id":"q1","listing_id":"a","query_text":"oak chair","country":0,"label":1}
{"query_id":"q1","listing_id":"b","query_text":"oak chair","country":0,"label":0}
{"query_id":"s1","listing_id":"a","query_text":"chair","country":0,"label":1,"provenance":"synthetic-S1"}
"#;
        let log = parse_engagements(text, "e").unwrap();
        assert_eq!(log.queries.len(), 2);
        assert_eq!(log.engagements[2].provenance, Provenance::SyntheticS1);

        let listings = parse_listings(TWO, "t").unwrap();
        let bundle = DatasetBundle::new(listings, log.queries, log.engagements, vec![]).unwrap();
        assert_eq!(parse_engagements(&write_engagements(&bundle), "e").unwrap().engagements, bundle.engagements);

        let bad = r#"{"query_id":"q1","listing_id":"zz","query_text":"x","country":0,"label":1}"#;
        let log = parse_engagements(bad, "e").unwrap();
        let listings = parse_listings(TWO, "t").unwrap();
        assert!(matches!(
            DatasetBundle::new(listings, log.queries, log.engagements, vec![]),
            Err(CorpusError::Integrity { .. })
        ));
    }
}
