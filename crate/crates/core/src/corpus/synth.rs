//! Seeded synthetic marketplace.
//!
//! Every listing has five latent attributes (category, brand, attribute,
//! condition, location) rendered into a title/description with seller noise
//! and misspellings. Buyer queries are clean subsets of a listing's
//! attributes. Each query is shown alongside a few distractor listings; the
//! latent relevance of a (query, listing) pair is the Jaccard overlap of
//! their attribute sets.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{self, ATTRIBUTES, CATEGORIES, CONDITIONS, LOCATIONS, NOISE_PHRASES};
use super::{
    CorpusError, DatasetBundle, EngagementRecord, Grade, Listing, ListingSet, Provenance,
    QueryRecord, RelevanceJudgment, REFERENCE_TIME,
};

pub const ENGAGED_THRESHOLD: f64 = 0.5;
pub const RELEVANT_THRESHOLD: f64 = 0.6;
pub const SOMEWHAT_THRESHOLD: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthCorpusConfig {
    pub seed: u64,
    pub n_listings: usize,
    pub n_queries_per_listing: usize,
    /// Per-word probability of a seller misspelling.
    pub typo_rate: f64,
    /// Probability that a buyer names the category by its associative term.
    pub synonym_rate: f64,
    pub category_count: usize,
    pub brand_vocab_size: usize,
    pub judgment_fraction: f64,
    /// Listings shown per query (the source listing plus distractors).
    pub shown_per_query: usize,
    pub image_dim: usize,
    pub country_count: u32,
}

impl Default for SynthCorpusConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            n_listings: 5000,
            n_queries_per_listing: 2,
            typo_rate: 0.15,
            synonym_rate: 0.25,
            category_count: 16,
            brand_vocab_size: 64,
            judgment_fraction: 0.5,
            shown_per_query: 5,
            image_dim: 32,
            country_count: 4,
        }
    }
}

impl SynthCorpusConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: &str| Err(CorpusError::InvalidConfig(m.to_owned()));
        if self.n_listings == 0 || self.n_queries_per_listing == 0 || self.shown_per_query == 0 {
            return bad("counts must be positive");
        }
        if self.shown_per_query > self.n_listings {
            return bad("shown_per_query exceeds n_listings");
        }
        if !(0.0..=1.0).contains(&self.typo_rate) || !(0.0..=1.0).contains(&self.synonym_rate) {
            return bad("typo_rate and synonym_rate must lie in [0, 1]");
        }
        if !(self.judgment_fraction > 0.0 && self.judgment_fraction <= 1.0) {
            return bad("judgment_fraction must lie in (0, 1]");
        }
        if self.category_count == 0 || self.category_count > CATEGORIES.len() {
            return bad("category_count must lie in [1, 16]");
        }
        if self.brand_vocab_size == 0 || self.brand_vocab_size > vocab::MAX_BRANDS {
            return bad("brand_vocab_size must lie in [1, 256]");
        }
        if self.image_dim == 0 || self.country_count == 0 {
            return bad("image_dim and country_count must be positive");
        }
        Ok(())
    }
}

/// Latent attribute values, one index per slot in `Slot::ORDER`.
type Attrs = [usize; 5];

fn slot_word(slot: usize, value: usize) -> String {
    match slot {
        0 => CATEGORIES[value].0.to_owned(),
        1 => vocab::brand(value),
        2 => ATTRIBUTES[value].to_owned(),
        3 => CONDITIONS[value].to_owned(),
        _ => LOCATIONS[value].to_owned(),
    }
}

fn jaccard(query: &[(usize, usize)], listing: &Attrs) -> f64 {
    let inter = query.iter().filter(|(s, v)| listing[*s] == *v).count();
    inter as f64 / (query.len() + listing.len() - inter) as f64
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn misspell(word: &str, rng: &mut ChaCha8Rng) -> String {
    let mut chars: Vec<char> = word.chars().collect();
    let n = chars.len();
    let pos = rng.gen_range(1..n);
    match rng.gen_range(0..4) {
        0 => {
            chars.remove(pos);
        }
        1 if pos + 1 < n => chars.swap(pos, pos + 1),
        1 => chars.swap(pos - 1, pos),
        2 => chars[pos] = (b'a' + rng.gen_range(0..26u8)) as char,
        _ => chars.insert(pos, chars[pos]),
    }
    chars.into_iter().collect()
}

fn inject_typos(text: &str, rate: f64, rng: &mut ChaCha8Rng) -> String {
    if rate == 0.0 {
        return text.to_owned();
    }
    text.split(' ')
        .map(|piece| {
            let core_len = piece.chars().take_while(|c| c.is_alphabetic()).count();
            let draw = rng.gen::<f64>();
            if core_len >= 4 && draw < rate {
                let (core, rest) = piece.split_at(piece.char_indices().nth(core_len).map_or(piece.len(), |(i, _)| i));
                format!("{}{}", misspell(core, rng), rest)
            } else {
                piece.to_owned()
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn render_listing(a: &Attrs, rng: &mut ChaCha8Rng) -> (String, String) {
    let cat = CATEGORIES[a[0]].0;
    let brand = capitalize(&vocab::brand(a[1]));
    let attr = ATTRIBUTES[a[2]];
    let cond = CONDITIONS[a[3]];
    let loc = capitalize(LOCATIONS[a[4]]);
    let mut title = match rng.gen_range(0..3) {
        0 => format!("{brand} {attr} {cat}"),
        1 => format!("{} {cat} by {brand}", capitalize(attr)),
        _ => format!("{} - {brand} {attr}", capitalize(cat)),
    };
    let noise = if rng.gen_bool(0.6) {
        let p = NOISE_PHRASES[rng.gen_range(0..NOISE_PHRASES.len())];
        if rng.gen_bool(0.5) { p.to_uppercase() } else { capitalize(p) }
    } else {
        String::new()
    };
    let description = if rng.gen_bool(0.15) {
        title = format!("{title} {cond} {loc}");
        String::new()
    } else {
        let body = match rng.gen_range(0..3) {
            0 => format!("{} {cat} in {loc}.", capitalize(cond)),
            1 => format!("Selling my {attr} {cat}, {cond} condition. {loc} area."),
            _ => format!("{brand} {cat} in {cond} condition, located in {loc}."),
        };
        if noise.is_empty() { body } else { format!("{body} {noise}") }
    };
    (title, description)
}

fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

fn sample_query(a: &Attrs, synonym_rate: f64, rng: &mut ChaCha8Rng) -> (String, Vec<(usize, usize)>) {
    const SIZE_WEIGHTS: [(usize, u32); 5] = [(1, 10), (2, 30), (3, 35), (4, 20), (5, 5)];
    let total: u32 = SIZE_WEIGHTS.iter().map(|w| w.1).sum();
    let mut draw = rng.gen_range(0..total);
    let mut k = 1;
    for (size, w) in SIZE_WEIGHTS {
        if draw < w {
            k = size;
            break;
        }
        draw -= w;
    }
    let with_category = k == 5 || rng.gen_bool(0.85);
    let mut others = vec![1usize, 2, 3, 4];
    others.shuffle(rng);
    let n_others = if with_category { k - 1 } else { k.min(4) };
    let mut slots: Vec<usize> = others[..n_others].to_vec();
    let mut words: Vec<String> = slots.iter().map(|&s| slot_word(s, a[s])).collect();
    if with_category {
        slots.push(0);
        let (cat, syn, _) = CATEGORIES[a[0]];
        let use_syn = rng.gen_bool(synonym_rate);
        words.push(if use_syn { syn } else { cat }.to_owned());
    }
    let set = slots.iter().map(|&s| (s, a[s])).collect();
    (words.join(" "), set)
}

/// Deterministic in `cfg`: identical configs produce identical bundles.
pub fn generate_synthetic_corpus(cfg: &SynthCorpusConfig) -> Result<DatasetBundle, CorpusError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let prototypes: Vec<Vec<f64>> = (0..cfg.category_count)
        .map(|_| (0..cfg.image_dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();

    let mut attrs: Vec<Attrs> = Vec::with_capacity(cfg.n_listings);
    let mut listings = ListingSet::new();
    for i in 0..cfg.n_listings {
        let a: Attrs = [
            rng.gen_range(0..cfg.category_count),
            rng.gen_range(0..cfg.brand_vocab_size),
            rng.gen_range(0..ATTRIBUTES.len()),
            rng.gen_range(0..CONDITIONS.len()),
            rng.gen_range(0..LOCATIONS.len()),
        ];
        let (title, description) = render_listing(&a, &mut rng);
        let title = inject_typos(&title, cfg.typo_rate, &mut rng);
        let description = inject_typos(&description, cfg.typo_rate, &mut rng);
        let condition_factor = [1.0, 0.6, 0.75, 0.9, 0.4, 1.05][a[3]];
        let price = CATEGORIES[a[0]].2 as f64 * rng.gen_range(0.5..1.5) * condition_factor;
        let n_images = rng.gen_range(0..=3);
        let image_vectors = (0..n_images)
            .map(|_| {
                prototypes[a[0]].iter().map(|p| round4(p + rng.gen_range(-0.3..0.3))).collect()
            })
            .collect();
        listings.insert(Listing {
            id: format!("l{i:05}"),
            title,
            description,
            price: (price / 100.0).round() as u64 * 100,
            category: a[0] as u32,
            country: rng.gen_range(0..cfg.country_count),
            created_at: REFERENCE_TIME - rng.gen_range(0..365 * 86_400),
            image_vectors,
        })?;
        attrs.push(a);
    }

    let mut by_category = vec![Vec::new(); cfg.category_count];
    let mut by_brand = vec![Vec::new(); cfg.brand_vocab_size];
    for (i, a) in attrs.iter().enumerate() {
        by_category[a[0]].push(i);
        by_brand[a[1]].push(i);
    }

    let mut queries = Vec::new();
    let mut engagements = Vec::new();
    let mut judgments = Vec::new();
    for (i, a) in attrs.iter().enumerate() {
        let listing = &listings.as_slice()[i];
        for j in 0..cfg.n_queries_per_listing {
            let (text, qset) = sample_query(a, cfg.synonym_rate, &mut rng);
            let qid = format!("q{i:05}-{j}");
            queries.push(QueryRecord { id: qid.clone(), text, country: listing.country });

            let mut shown = vec![i];
            while shown.len() < cfg.shown_per_query {
                let r = rng.gen::<f64>();
                let pool = if r < 0.5 {
                    Some(&by_category[a[0]])
                } else if r < 0.75 {
                    Some(&by_brand[a[1]])
                } else {
                    None
                };
                let mut pick = match pool {
                    Some(p) => p[rng.gen_range(0..p.len())],
                    None => rng.gen_range(0..cfg.n_listings),
                };
                if shown.contains(&pick) {
                    pick = rng.gen_range(0..cfg.n_listings);
                }
                if !shown.contains(&pick) {
                    shown.push(pick);
                }
            }
            for &l in &shown {
                let score = jaccard(&qset, &attrs[l]);
                let lid = listings.as_slice()[l].id.clone();
                engagements.push(EngagementRecord {
                    query_id: qid.clone(),
                    listing_id: lid.clone(),
                    label: u8::from(score >= ENGAGED_THRESHOLD),
                    provenance: Provenance::Original,
                });
                if rng.gen_bool(cfg.judgment_fraction) {
                    let grade = if score >= RELEVANT_THRESHOLD {
                        Grade::Relevant
                    } else if score >= SOMEWHAT_THRESHOLD {
                        Grade::SomewhatRelevant
                    } else {
                        Grade::OffTopic
                    };
                    judgments.push(RelevanceJudgment {
                        query_id: qid.clone(),
                        listing_id: lid,
                        grade,
                        provenance: Provenance::Original,
                    });
                }
            }
        }
    }
    DatasetBundle::new(listings, queries, engagements, judgments)
}
