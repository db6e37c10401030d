//! Fixed marketplace vocabularies shared by the synthetic corpus generator and
//! the offline generation backend.

use std::collections::BTreeMap;
use std::sync::OnceLock;

/// (category word, associative/synonym word, base price in minor units)
pub const CATEGORIES: [(&str, &str, u64); 16] = [
    ("sofa", "couch", 35_000),
    ("chair", "seat", 6_000),
    ("table", "desk", 15_000),
    ("bike", "bicycle", 25_000),
    ("phone", "smartphone", 30_000),
    ("television", "tv", 40_000),
    ("laptop", "notebook", 60_000),
    ("stroller", "pram", 12_000),
    ("fridge", "refrigerator", 45_000),
    ("lamp", "light", 3_000),
    ("guitar", "ukulele", 20_000),
    ("camera", "camcorder", 35_000),
    ("mattress", "bed", 25_000),
    ("speaker", "soundbar", 9_000),
    ("sneakers", "shoes", 8_000),
    ("jacket", "coat", 7_000),
];

const BRAND_PREFIXES: [&str; 16] = [
    "zan", "kor", "vel", "mar", "tor", "bel", "lum", "dar", "fen", "gal", "hol", "jin", "kel",
    "nor", "pax", "quin",
];
const BRAND_SUFFIXES: [&str; 16] = [
    "ex", "io", "ora", "tek", "ix", "ano", "une", "aro", "ent", "ova", "ium", "ari", "olt", "yne",
    "eco", "ust",
];
pub const MAX_BRANDS: usize = BRAND_PREFIXES.len() * BRAND_SUFFIXES.len();

pub const ATTRIBUTES: [&str; 22] = [
    "red", "blue", "green", "black", "white", "grey", "brown", "pink", "yellow", "orange",
    "purple", "silver", "gold", "oak", "walnut", "leather", "metal", "glass", "wooden", "steel",
    "large", "compact",
];

pub const CONDITIONS: [&str; 6] = ["new", "used", "refurbished", "mint", "worn", "unopened"];

pub const LOCATIONS: [&str; 12] = [
    "austin", "boston", "denver", "seattle", "miami", "chicago", "portland", "atlanta", "dallas",
    "phoenix", "tampa", "omaha",
];

/// Seller boilerplate that carries no product information.
pub const NOISE_PHRASES: [&str; 6] =
    ["obo", "pick up only", "cash only", "must go", "no lowballers", "price firm"];

/// Filler words never treated as attributes.
pub const STOPWORDS: [&str; 18] = [
    "a", "an", "the", "in", "my", "for", "and", "with", "of", "to", "selling", "condition",
    "area", "located", "by", "is", "details", "location",
];

pub fn brand(i: usize) -> String {
    format!("{}{}", BRAND_PREFIXES[i / BRAND_SUFFIXES.len()], BRAND_SUFFIXES[i % BRAND_SUFFIXES.len()])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Slot {
    Category,
    Brand,
    Attribute,
    Condition,
    Location,
}

impl Slot {
    pub const ORDER: [Slot; 5] =
        [Slot::Category, Slot::Brand, Slot::Attribute, Slot::Condition, Slot::Location];
}

/// Token → (slot, canonical value). Category synonyms resolve to their
/// category.
#[derive(Debug)]
pub struct Lexicon {
    entries: BTreeMap<String, (Slot, String)>,
    synonyms: BTreeMap<String, String>,
}

impl Lexicon {
    pub fn standard() -> &'static Lexicon {
        static LEX: OnceLock<Lexicon> = OnceLock::new();
        LEX.get_or_init(|| {
            let mut entries = BTreeMap::new();
            let mut synonyms = BTreeMap::new();
            for (cat, syn, _) in CATEGORIES {
                entries.insert(cat.to_owned(), (Slot::Category, cat.to_owned()));
                entries.insert(syn.to_owned(), (Slot::Category, cat.to_owned()));
                synonyms.insert(cat.to_owned(), syn.to_owned());
            }
            for i in 0..MAX_BRANDS {
                let b = brand(i);
                entries.insert(b.clone(), (Slot::Brand, b));
            }
            for (slot, words) in [
                (Slot::Attribute, &ATTRIBUTES[..]),
                (Slot::Condition, &CONDITIONS[..]),
                (Slot::Location, &LOCATIONS[..]),
            ] {
                for w in words {
                    entries.insert((*w).to_owned(), (slot, (*w).to_owned()));
                }
            }
            Lexicon { entries, synonyms }
        })
    }

    pub fn lookup(&self, token: &str) -> Option<(Slot, &str)> {
        self.entries.get(token).map(|(s, v)| (*s, v.as_str()))
    }

    /// Associative term for a category word.
    pub fn synonym(&self, category: &str) -> Option<&str> {
        self.synonyms.get(category).map(String::as_str)
    }

    /// Spelling correction: the unique lexicon word within one edit
    /// (insert, delete, substitute, adjacent transposition) of `token`.
    pub fn correct(&self, token: &str) -> Option<&str> {
        if self.entries.contains_key(token) {
            return self.entries.get_key_value(token).map(|(k, _)| k.as_str());
        }
        if token.chars().count() < 3 {
            return None;
        }
        let mut found = None;
        for k in self.entries.keys() {
            if within_one_edit(token, k) {
                if found.is_some() {
                    return None;
                }
                found = Some(k.as_str());
            }
        }
        found
    }
}

/// Optimal-string-alignment distance ≤ 1.
pub fn within_one_edit(a: &str, b: &str) -> bool {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let (la, lb) = (a.len(), b.len());
    if la.abs_diff(lb) > 1 {
        return false;
    }
    let prefix = a.iter().zip(&b).take_while(|(x, y)| x == y).count();
    if prefix == la && la == lb {
        return true;
    }
    let (ra, rb) = (&a[prefix..], &b[prefix..]);
    match la.cmp(&lb) {
        std::cmp::Ordering::Equal => {
            ra[1..] == rb[1..]
                || (ra.len() >= 2 && ra[0] == rb[1] && ra[1] == rb[0] && ra[2..] == rb[2..])
        }
        std::cmp::Ordering::Less => ra == &rb[1..],
        std::cmp::Ordering::Greater => &ra[1..] == rb,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn brands_are_distinct() {
        let mut all: Vec<String> = (0..MAX_BRANDS).map(brand).collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), MAX_BRANDS);
    }

    #[test]
    fn edit_distance_cases() {
        assert!(within_one_edit("sofa", "sofa"));
        assert!(within_one_edit("sfoa", "sofa"));
        assert!(within_one_edit("sofaa", "sofa"));
        assert!(within_one_edit("sfa", "sofa"));
        assert!(within_one_edit("sofe", "sofa"));
        assert!(!within_one_edit("fosa", "sofa"));
        assert!(!within_one_edit("so", "sofa"));
    }

    #[test]
    fn lexicon_corrects_unambiguous_typos() {
        let lex = Lexicon::standard();
        assert_eq!(lex.correct("matress"), Some("mattress"));
        assert_eq!(lex.correct("seatle"), Some("seattle"));
        assert_eq!(lex.lookup("couch"), Some((Slot::Category, "sofa")));
        assert_eq!(lex.correct("qqqqq"), None);
    }
}
