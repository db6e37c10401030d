//! Synthetic data generation: prompt templates, query generation (S1),
//! listing enhancement (S2), enhancement followed by query generation (S3),
//! response parsing, a deterministic offline backend and a remote HTTP
//! completion client.

mod augment;
mod deterministic;
mod remote;

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use augment::{augment, AugmentFailure, AugmentOutput};
pub use deterministic::{deterministic_enhance, deterministic_generate, extract_attribute_tokens};
pub use remote::{
    llm_complete, Completion, HttpTransport, InFlightLimiter, RemoteClient, RemoteConfig, RemoteError, Transport,
    TransportError, ENDPOINT_ENV,
};

use crate::corpus::Listing;

pub const MAX_QUERIES_PER_LISTING: usize = 10;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("query count {0} outside [1, {MAX_QUERIES_PER_LISTING}]")]
    QueryCount(usize),
    #[error("listing {0} has an empty title")]
    EmptyTitle(String),
    #[error("template {template} contains unknown placeholder {{{name}}}")]
    UnknownPlaceholder { template: &'static str, name: String },
    #[error("response contains no queries")]
    NoQueries,
    #[error("empty enhancement response")]
    EmptyResponse,
    #[error("enhancement response contains placeholder text")]
    PlaceholderText,
    #[error("remote backend: {0}")]
    Remote(#[from] RemoteError),
}

impl SynthError {
    pub fn is_remote(&self) -> bool {
        matches!(self, SynthError::Remote(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    T1Basic,
    T2Detailed,
    ListingEnhance,
}

impl TemplateId {
    pub fn name(self) -> &'static str {
        match self {
            TemplateId::T1Basic => "T1_BASIC",
            TemplateId::T2Detailed => "T2_DETAILED",
            TemplateId::ListingEnhance => "LISTING_ENHANCE",
        }
    }

    pub fn template(self) -> PromptTemplate {
        let body = match self {
            TemplateId::T1Basic => include_str!("../../templates/t1_basic.txt"),
            TemplateId::T2Detailed => include_str!("../../templates/t2_detailed.txt"),
            TemplateId::ListingEnhance => include_str!("../../templates/listing_enhance.txt"),
        };
        PromptTemplate { id: self, body }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptTemplate {
    pub id: TemplateId,
    pub body: &'static str,
}

const PLACEHOLDERS: [&str; 2] = ["title", "description"];

/// Substitutes `{title}` and `{description}` verbatim (an empty description
/// becomes the empty string).
pub fn render_prompt(template: &PromptTemplate, listing: &Listing) -> Result<String, SynthError> {
    if listing.title.trim().is_empty() {
        return Err(SynthError::EmptyTitle(listing.id.clone()));
    }
    let mut out = String::with_capacity(template.body.len() + listing.title.len() + listing.description.len());
    let mut rest = template.body;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let close = after.find('}').ok_or_else(|| SynthError::UnknownPlaceholder {
            template: template.id.name(),
            name: after.chars().take(20).collect(),
        })?;
        match &after[..close] {
            "title" => out.push_str(&listing.title),
            "description" => out.push_str(&listing.description),
            other => {
                return Err(SynthError::UnknownPlaceholder { template: template.id.name(), name: other.to_owned() })
            }
        }
        rest = &after[close + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

/// Checks that a template body uses each declared placeholder exactly once
/// and no others.
pub fn check_template(template: &PromptTemplate) -> Result<(), SynthError> {
    for p in PLACEHOLDERS {
        let n = template.body.matches(&format!("{{{p}}}")).count();
        if n != 1 {
            return Err(SynthError::UnknownPlaceholder { template: template.id.name(), name: format!("{p} ×{n}") });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    S1,
    S2,
    S3,
}

impl Strategy {
    pub fn provenance(self) -> crate::corpus::Provenance {
        use crate::corpus::Provenance;
        match self {
            Strategy::S1 => Provenance::SyntheticS1,
            Strategy::S2 => Provenance::SyntheticS2,
            Strategy::S3 => Provenance::SyntheticS3,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Strategy::S1 => "s1",
            Strategy::S2 => "s2",
            Strategy::S3 => "s3",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "s1" => Ok(Strategy::S1),
            "s2" => Ok(Strategy::S2),
            "s3" => Ok(Strategy::S3),
            other => Err(format!("unknown strategy {other:?} (expected s1, s2 or s3)")),
        }
    }
}

/// Where generated text comes from.
#[derive(Debug, Clone)]
pub enum Backend {
    /// Seeded offline generator; a pure function of (listing, seed, n).
    Deterministic { seed: u64 },
    Remote(RemoteClient),
}

impl Backend {
    pub fn descriptor(&self) -> String {
        match self {
            Backend::Deterministic { seed } => format!("deterministic:seed={seed}"),
            Backend::Remote(c) => format!("remote:{}", c.config().model),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticQuery {
    pub text: String,
    pub parent_listing_id: String,
    pub strategy: Strategy,
    pub template: TemplateId,
    pub backend: String,
    /// 1-based position in the generator's list.
    pub ordinal: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnhancedListing {
    pub parent_listing_id: String,
    pub enhanced_description: String,
    pub strategy: Strategy,
    pub backend: String,
}

impl EnhancedListing {
    /// Id of the listing record that carries the enhanced description.
    pub fn listing_id(&self) -> String {
        format!("{}~{}", self.parent_listing_id, self.strategy.tag())
    }

    /// The parent listing with its description replaced.
    pub fn to_listing(&self, parent: &Listing) -> Listing {
        Listing { id: self.listing_id(), description: self.enhanced_description.clone(), ..parent.clone() }
    }
}

/// Accepts numbered ("1. x", "2) x"), bulleted ("- x", "* x", "• x") or
/// plain lines; trims, drops empties, dedupes case-insensitively and keeps
/// at most ten.
pub fn parse_query_response(raw: &str) -> Result<Vec<String>, SynthError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for line in raw.lines() {
        let mut s = line.trim();
        if let Some(rest) = s.strip_prefix(['-', '*', '•']) {
            s = rest.trim_start();
        } else {
            let digits = s.chars().take_while(|c| c.is_ascii_digit()).count();
            if digits > 0 {
                if let Some(rest) = s[digits..].strip_prefix(['.', ')', ':']) {
                    s = rest.trim_start();
                }
            }
        }
        let s = s.trim_matches('"').trim();
        if s.is_empty() {
            continue;
        }
        if seen.insert(s.to_lowercase()) {
            out.push(s.to_owned());
            if out.len() == MAX_QUERIES_PER_LISTING {
                break;
            }
        }
    }
    if out.is_empty() {
        return Err(SynthError::NoQueries);
    }
    Ok(out)
}

fn check_count(n: usize) -> Result<(), SynthError> {
    if (1..=MAX_QUERIES_PER_LISTING).contains(&n) {
        Ok(())
    } else {
        Err(SynthError::QueryCount(n))
    }
}

fn tag_queries(texts: Vec<String>, listing: &Listing, strategy: Strategy, template: TemplateId, backend: &Backend) -> Vec<SyntheticQuery> {
    let desc = backend.descriptor();
    texts
        .into_iter()
        .enumerate()
        .map(|(i, text)| SyntheticQuery {
            text,
            parent_listing_id: listing.id.clone(),
            strategy,
            template,
            backend: desc.clone(),
            ordinal: i as u32 + 1,
        })
        .collect()
}

fn queries_for(listing: &Listing, backend: &Backend, template: TemplateId, n: usize) -> Result<Vec<String>, SynthError> {
    check_count(n)?;
    if listing.title.trim().is_empty() {
        return Err(SynthError::EmptyTitle(listing.id.clone()));
    }
    let mut texts = match backend {
        Backend::Deterministic { seed } => deterministic_generate(listing, *seed, n),
        Backend::Remote(client) => {
            let prompt = render_prompt(&template.template(), listing)?;
            parse_query_response(&llm_complete(client, &prompt)?.text)?
        }
    };
    texts.truncate(n);
    if texts.is_empty() {
        return Err(SynthError::NoQueries);
    }
    Ok(texts)
}

/// Strategy S1: up to `n` queries generated from the listing.
pub fn generate_queries(
    listing: &Listing,
    backend: &Backend,
    template: TemplateId,
    n: usize,
) -> Result<Vec<SyntheticQuery>, SynthError> {
    let texts = queries_for(listing, backend, template, n)?;
    Ok(tag_queries(texts, listing, Strategy::S1, template, backend))
}

fn enhance_with(listing: &Listing, backend: &Backend, strategy: Strategy) -> Result<EnhancedListing, SynthError> {
    if listing.title.trim().is_empty() {
        return Err(SynthError::EmptyTitle(listing.id.clone()));
    }
    let text = match backend {
        Backend::Deterministic { .. } => deterministic_enhance(listing),
        Backend::Remote(client) => {
            let prompt = render_prompt(&TemplateId::ListingEnhance.template(), listing)?;
            llm_complete(client, &prompt)?.text.trim().to_owned()
        }
    };
    if text.is_empty() {
        return Err(SynthError::EmptyResponse);
    }
    if text.to_lowercase().contains("insert features here") {
        return Err(SynthError::PlaceholderText);
    }
    Ok(EnhancedListing {
        parent_listing_id: listing.id.clone(),
        enhanced_description: text,
        strategy,
        backend: backend.descriptor(),
    })
}

/// Strategy S2: an enhanced description for the listing.
pub fn enhance_listing(listing: &Listing, backend: &Backend) -> Result<EnhancedListing, SynthError> {
    enhance_with(listing, backend, Strategy::S2)
}

/// Strategy S3: enhance, then generate queries from the enhanced listing.
/// Queries point at the enhanced listing record.
pub fn generate_s3(
    listing: &Listing,
    backend: &Backend,
    template: TemplateId,
    n: usize,
) -> Result<(EnhancedListing, Vec<SyntheticQuery>), SynthError> {
    check_count(n)?;
    let enhanced = enhance_with(listing, backend, Strategy::S3)?;
    let enhanced_listing = enhanced.to_listing(listing);
    let texts = queries_for(&enhanced_listing, backend, template, n)?;
    let queries = tag_queries(texts, &enhanced_listing, Strategy::S3, template, backend);
    Ok((enhanced, queries))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn listing(title: &str, description: &str) -> Listing {
        Listing {
            id: "l00001".into(),
            title: title.into(),
            description: description.into(),
            price: 1000,
            category: 0,
            country: 0,
            created_at: 0,
            image_vectors: vec![],
        }
    }

    #[test]
    fn templates_render() {
        let l = listing("Zanex red sofa", "Used sofa in Austin.");
        for id in [TemplateId::T1Basic, TemplateId::T2Detailed, TemplateId::ListingEnhance] {
            check_template(&id.template()).unwrap();
            let p = render_prompt(&id.template(), &l).unwrap();
            assert!(!p.contains("{title}") && !p.contains("{description}"));
            assert!(p.contains("Zanex red sofa"));
        }
        assert!(render_prompt(&TemplateId::T2Detailed.template(), &l).unwrap().contains("step-by-step"));
        let enh = render_prompt(&TemplateId::ListingEnhance.template(), &l).unwrap();
        assert!(enh.contains("NEVER create placeholder text like \"insert features here\""));
        let empty = render_prompt(&TemplateId::T1Basic.template(), &listing("Lamp", "")).unwrap();
        assert!(empty.ends_with("Lamp\n\n"));
        let bad = PromptTemplate { id: TemplateId::T1Basic, body: "x {price}" };
        assert!(matches!(render_prompt(&bad, &l), Err(SynthError::UnknownPlaceholder { .. })));
        assert!(matches!(render_prompt(&TemplateId::T1Basic.template(), &listing(" ", "")), Err(SynthError::EmptyTitle(_))));
    }

    #[test]
    fn parse_formats() {
        assert_eq!(parse_query_response("1. red sofa\n2. couch").unwrap(), vec!["red sofa", "couch"]);
        assert_eq!(parse_query_response("red sofa\nRED SOFA").unwrap(), vec!["red sofa"]);
        assert_eq!(parse_query_response("- a\n* b\n• c\n3) d\n\n").unwrap(), vec!["a", "b", "c", "d"]);
        assert!(matches!(parse_query_response(""), Err(SynthError::NoQueries)));
        let many: String = (0..15).map(|i| format!("q{i}\n")).collect();
        assert_eq!(parse_query_response(&many).unwrap().len(), 10);
    }

    #[test]
    fn query_count_bounds() {
        let l = listing("Zanex red sofa", "Used sofa in Austin.");
        let b = Backend::Deterministic { seed: 1 };
        assert!(matches!(generate_queries(&l, &b, TemplateId::T2Detailed, 11), Err(SynthError::QueryCount(11))));
        assert!(matches!(generate_queries(&l, &b, TemplateId::T2Detailed, 0), Err(SynthError::QueryCount(0))));
        let qs = generate_queries(&l, &b, TemplateId::T2Detailed, 10).unwrap();
        assert!(!qs.is_empty() && qs.len() <= 10);
        assert_eq!(qs, generate_queries(&l, &b, TemplateId::T2Detailed, 10).unwrap());
        for (i, q) in qs.iter().enumerate() {
            assert_eq!(q.ordinal as usize, i + 1);
            assert_eq!(q.strategy, Strategy::S1);
            assert_eq!(q.parent_listing_id, "l00001");
        }
    }

    #[test]
    fn s3_is_composition() {
        let l = listing("Zanex red sfoa", "Used sofa in Austin. OBO");
        let b = Backend::Deterministic { seed: 4 };
        let (enh, qs) = generate_s3(&l, &b, TemplateId::T2Detailed, 5).unwrap();
        let s2 = enhance_listing(&l, &b).unwrap();
        assert_eq!(enh.enhanced_description, s2.enhanced_description);
        let direct = generate_queries(&enh.to_listing(&l), &b, TemplateId::T2Detailed, 5).unwrap();
        assert_eq!(qs.iter().map(|q| &q.text).collect::<Vec<_>>(), direct.iter().map(|q| &q.text).collect::<Vec<_>>());
        assert!(qs.iter().all(|q| q.strategy == Strategy::S3 && q.parent_listing_id == "l00001~s3"));
    }
}
