//! Hash fixture and property-based invariants.

use a2s_core::corpus::{
    blend_datasets, generate_synthetic_corpus, parse_engagements, parse_listings, split_train_valid, write_engagements,
    write_listings, SynthCorpusConfig,
};
use a2s_core::evalmetrics::{distinct2, pbc, roc_auc, roc_auc_bruteforce};
use a2s_core::features::{fnv1a64, hash_token};
use a2s_core::synthgen::{deterministic_enhance, deterministic_generate, parse_query_response};
use proptest::prelude::*;

#[test]
fn fnv1a_matches_golden_fixture() {
    let text = include_str!("fixtures/fnv1a_golden.tsv");
    let mut rows = 0;
    for line in text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty()) {
        let f: Vec<&str> = line.split('\t').collect();
        let (token, hex, buckets, bucket): (&str, &str, usize, u32) =
            (f[0], f[1], f[2].parse().unwrap(), f[3].parse().unwrap());
        assert_eq!(format!("{:016x}", fnv1a64(token.as_bytes())), hex, "{token}");
        assert_eq!(hash_token(token, buckets).unwrap(), bucket, "{token} mod {buckets}");
        rows += 1;
    }
    assert!(rows > 0);
}

#[test]
fn corpus_round_trips_through_jsonl() {
    let b = generate_synthetic_corpus(&SynthCorpusConfig { n_listings: 50, ..Default::default() }).unwrap();
    let listings = parse_listings(&write_listings(b.listings.iter()), "mem").unwrap();
    assert_eq!(listings, b.listings);
    let log = parse_engagements(&write_engagements(&b), "mem").unwrap();
    assert_eq!(log.engagements, b.engagements);
}

#[test]
fn blend_and_split_keep_integrity() {
    let b = generate_synthetic_corpus(&SynthCorpusConfig { n_listings: 80, ..Default::default() }).unwrap();
    let (tr, va) = split_train_valid(&b, 0.25, 3).unwrap();
    let tq: std::collections::HashSet<_> = tr.engagements.iter().map(|e| &e.query_id).collect();
    assert!(va.engagements.iter().all(|e| !tq.contains(&e.query_id)));
    assert_eq!(tr.engagements.len() + va.engagements.len(), b.engagements.len());
    let blend = blend_datasets(&tr, &va, 100, 50, 1).unwrap();
    assert_eq!(blend.engagements.len(), 150);
    blend.check_integrity().unwrap();
    assert!(blend_datasets(&tr, &va, tr.engagements.len() + 1, 0, 1).is_err());
}

fn scores_and_labels() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (2usize..60).prop_flat_map(|n| {
        (prop::collection::vec(prop_oneof![(-3i32..3).prop_map(f64::from), -1.0f64..1.0], n), prop::collection::vec(0u8..2, n))
    })
    .prop_filter("both classes", |(_, y)| y.contains(&0) && y.contains(&1))
}

proptest! {
    #[test]
    fn roc_auc_matches_bruteforce_and_is_bounded((s, y) in scores_and_labels()) {
        let a = roc_auc(&s, &y).unwrap();
        prop_assert!((a - roc_auc_bruteforce(&s, &y).unwrap()).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
        // Flipping the scores mirrors the AUC.
        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        prop_assert!((roc_auc(&neg, &y).unwrap() - (1.0 - a)).abs() < 1e-12);
    }

    #[test]
    fn pbc_is_invariant_to_affine_rescaling((s, y) in scores_and_labels(), k in 0.1f64..10.0, c in -5.0f64..5.0) {
        if let Ok(p) = pbc(&s, &y) {
            let t: Vec<f64> = s.iter().map(|v| k * v + c).collect();
            prop_assert!((pbc(&t, &y).unwrap() - p).abs() < 1e-9);
            prop_assert!(p.abs() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn distinct2_lies_in_unit_interval(texts in prop::collection::vec("[a-c]{1,3}( [a-c]{1,3}){1,5}", 1..10)) {
        let d = distinct2(&texts).unwrap();
        prop_assert!(d > 0.0 && d <= 1.0);
    }

    #[test]
    fn query_parser_never_returns_blank_or_duplicate_lines(raw in "(([0-9]{1,2}[.)] )?[a-zA-Z ]{0,12}\n){0,15}") {
        if let Ok(qs) = parse_query_response(&raw) {
            prop_assert!(!qs.is_empty() && qs.len() <= 10);
            prop_assert!(qs.iter().all(|q| !q.trim().is_empty()));
            let lower: std::collections::HashSet<String> = qs.iter().map(|q| q.to_lowercase()).collect();
            prop_assert_eq!(lower.len(), qs.len());
        }
    }

    #[test]
    fn deterministic_backend_is_pure(title in "[A-Za-z ]{1,30}", desc in "[A-Za-z .]{0,60}", seed in 0u64..4, n in 1usize..=10) {
        let l = a2s_core::corpus::Listing {
            id: "p".into(), title, description: desc, price: 0, category: 0, country: 0, created_at: 0, image_vectors: vec![],
        };
        let a = deterministic_generate(&l, seed, n);
        prop_assert_eq!(&a, &deterministic_generate(&l, seed, n));
        prop_assert!(a.len() <= n);
        let uniq: std::collections::HashSet<&String> = a.iter().collect();
        prop_assert_eq!(uniq.len(), a.len());
        prop_assert!(!deterministic_enhance(&l).trim().is_empty() || l.title.trim().is_empty());
    }
}
