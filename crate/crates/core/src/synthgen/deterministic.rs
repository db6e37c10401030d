//! Offline stand-in for a prompted generator.
//!
//! Query generation mimics the attribute-combination behaviour asked for by
//! the detailed template: it recognizes vocabulary words verbatim (no
//! spelling correction), then emits combinations of attributes ending in the
//! product noun, longest first, plus one query naming the product by its
//! associative term. Enhancement mimics the listing-enhancement template:
//! it corrects misspellings against the vocabulary, drops seller
//! boilerplate and restates the attributes in a fixed order.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::vocab::{Lexicon, Slot, NOISE_PHRASES, STOPWORDS};
use crate::corpus::Listing;
use crate::features::{fnv1a64, tokenize_words};

fn listing_text(l: &Listing) -> String {
    format!("{} {}", l.title, l.description)
}

/// Recognized (slot, canonical word) pairs in order of first appearance, one
/// per slot. With `correct`, misspelled words are repaired first.
pub fn extract_attribute_tokens(text: &str, correct: bool) -> Vec<(Slot, String)> {
    let lex = Lexicon::standard();
    let mut found: Vec<(Slot, String)> = Vec::new();
    for tok in strip_noise(&tokenize_words(text)) {
        let hit = if correct {
            lex.correct(&tok).and_then(|w| lex.lookup(w))
        } else {
            lex.lookup(&tok)
        };
        if let Some((slot, word)) = hit {
            if !found.iter().any(|(s, _)| *s == slot) {
                found.push((slot, word.to_owned()));
            }
        }
    }
    found
}

fn strip_noise(tokens: &[String]) -> Vec<String> {
    let phrases: Vec<Vec<&str>> = NOISE_PHRASES.iter().map(|p| p.split(' ').collect()).collect();
    let mut out = Vec::with_capacity(tokens.len());
    let mut i = 0;
    'outer: while i < tokens.len() {
        for p in &phrases {
            if tokens.len() - i >= p.len() && p.iter().zip(&tokens[i..]).all(|(a, b)| a == b) {
                i += p.len();
                continue 'outer;
            }
        }
        out.push(tokens[i].clone());
        i += 1;
    }
    out
}

fn content_tokens(text: &str) -> Vec<String> {
    let mut seen = Vec::new();
    for t in strip_noise(&tokenize_words(text)) {
        if t.len() >= 3 && t.chars().all(char::is_alphabetic) && !STOPWORDS.contains(&t.as_str()) && !seen.contains(&t) {
            seen.push(t);
        }
    }
    seen
}

fn subsets<T: Clone>(items: &[T], k: usize) -> Vec<Vec<T>> {
    if k == 0 {
        return vec![Vec::new()];
    }
    if items.len() < k {
        return Vec::new();
    }
    let mut with: Vec<Vec<T>> = subsets(&items[1..], k - 1)
        .into_iter()
        .map(|mut s| {
            s.insert(0, items[0].clone());
            s
        })
        .collect();
    with.extend(subsets(&items[1..], k));
    with
}

fn listing_seed(l: &Listing, seed: u64) -> u64 {
    let mut bytes = Vec::new();
    for part in [&l.id, &l.title, &l.description] {
        bytes.extend_from_slice(part.as_bytes());
        bytes.push(0);
    }
    fnv1a64(&bytes) ^ seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Up to `n` distinct queries; exactly `min(n, available combinations)`.
pub fn deterministic_generate(listing: &Listing, seed: u64, n: usize) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(listing_seed(listing, seed));
    let attrs = extract_attribute_tokens(&listing_text(listing), false);
    let category = attrs.iter().find(|(s, _)| *s == Slot::Category).map(|(_, w)| w.clone());
    let mut others: Vec<(Slot, String)> = attrs.iter().filter(|(s, _)| *s != Slot::Category).cloned().collect();
    others.sort_by_key(|(s, _)| *s);
    let mut others: Vec<String> = others.into_iter().map(|(_, w)| w).collect();
    if category.is_none() && others.is_empty() {
        others = content_tokens(&listing_text(listing));
    }

    // Combinations of 1–4 tokens; with a known product noun every query ends
    // in it.
    let (max_others, min_others) = if category.is_some() { (3, 0) } else { (4, 1) };
    let mut queries: Vec<Vec<String>> = Vec::new();
    for k in (min_others..=max_others.min(others.len())).rev() {
        let mut bucket = subsets(&others, k);
        bucket.shuffle(&mut rng);
        for mut words in bucket {
            words.extend(category.clone());
            if !words.is_empty() {
                queries.push(words);
            }
        }
    }
    if let (Some(cat), Some(first)) = (&category, queries.first()) {
        if let Some(syn) = Lexicon::standard().synonym(cat) {
            let mut assoc = first.clone();
            *assoc.last_mut().unwrap() = syn.to_owned();
            queries.insert(1, assoc);
        }
    }
    queries.into_iter().take(n).map(|w| w.join(" ")).collect()
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    c.next().map(|f| f.to_uppercase().chain(c).collect()).unwrap_or_default()
}

/// Corrected, boilerplate-free restatement of the listing's attributes in
/// the order category, brand, features, condition, location. Works from the
/// title alone when the description is empty.
pub fn deterministic_enhance(listing: &Listing) -> String {
    let mut attrs = extract_attribute_tokens(&listing_text(listing), true);
    if attrs.is_empty() {
        let words = content_tokens(&listing_text(listing));
        let body = if words.is_empty() { listing.title.trim().to_owned() } else { words.join(" ") };
        return format!("Item: {body}.");
    }
    attrs.sort_by_key(|(s, _)| *s);
    attrs
        .iter()
        .map(|(slot, w)| match slot {
            Slot::Category => format!("{}.", capitalize(w)),
            Slot::Brand => format!("Brand: {}.", capitalize(w)),
            Slot::Attribute => format!("Features: {w}."),
            Slot::Condition => format!("Condition: {w}."),
            Slot::Location => format!("Location: {}.", capitalize(w)),
        })
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn listing(title: &str, description: &str) -> Listing {
        Listing {
            id: "l1".into(),
            title: title.into(),
            description: description.into(),
            price: 0,
            category: 0,
            country: 0,
            created_at: 0,
            image_vectors: vec![],
        }
    }

    #[test]
    fn combinations_longest_first() {
        let l = listing("Zanex red sofa", "Used sofa in Austin. OBO");
        let qs = deterministic_generate(&l, 0, 10);
        assert_eq!(qs.len(), 10);
        assert!(qs[0].ends_with("sofa") && qs[0].split(' ').count() == 4);
        assert!(qs[1].ends_with("couch"));
        // 4 others → 4 + 6 + 4 + 1 combinations, plus the associative query.
        let full = deterministic_generate(&l, 0, 10).len();
        assert_eq!(full, 10);
        assert_eq!(deterministic_generate(&listing("Lamp", ""), 0, 10), vec!["lamp", "light"]);
        assert_eq!(deterministic_generate(&l, 9, 10), deterministic_generate(&l, 9, 10));
    }

    #[test]
    fn unknown_vocabulary_falls_back_to_content_words() {
        let qs = deterministic_generate(&listing("Vintage typewriter", ""), 0, 10);
        assert_eq!(qs.len(), 3);
        assert!(qs.contains(&"vintage typewriter".to_owned()));
    }

    #[test]
    fn enhancement_rules() {
        let e = deterministic_enhance(&listing("Zanex red sfoa", "Used sofa in Austin. PICK UP ONLY"));
        assert_eq!(e, "Sofa. Brand: Zanex. Features: red. Condition: used. Location: Austin.");
        let title_only = deterministic_enhance(&listing("Red lamp by Korex used Boston", ""));
        assert!(title_only.starts_with("Lamp."));
        assert!(!title_only.to_lowercase().contains("insert features here"));
        assert!(!deterministic_enhance(&listing("OBO", "")).is_empty());
    }
}
