//! Shared fixtures for the pipeline benchmarks in `benches/`.

use a2s_core::corpus::{generate_synthetic_corpus, DatasetBundle, SynthCorpusConfig};
use a2s_core::features::{featurize_document, featurize_query, DocumentFeatures, FeatureConfig, QueryFeatures};
use a2s_core::towers::{init_params, ModelConfig, ModelParams};

pub struct Fixture {
    pub corpus: DatasetBundle,
    pub features: FeatureConfig,
    pub params: ModelParams,
    /// Featurized engagement pairs in log order.
    pub pairs: Vec<(QueryFeatures, DocumentFeatures, u8)>,
}

/// A seeded corpus of `n_listings` plus a freshly initialized model.
pub fn fixture(n_listings: usize, embed_dim: usize) -> Fixture {
    let corpus = generate_synthetic_corpus(&SynthCorpusConfig { n_listings, ..Default::default() }).expect("corpus");
    let features = FeatureConfig { trigram_buckets: 4096, word_buckets: 2048, ..Default::default() };
    let model = ModelConfig { embed_dim, fusion_hidden: embed_dim, ..Default::default() };
    let params = init_params(&model, &features).expect("params");
    let queries = corpus.query_map();
    let pairs = corpus
        .engagements
        .iter()
        .map(|e| {
            let q = featurize_query(queries[e.query_id.as_str()], &features).expect("query");
            let l = corpus.listings.get(&e.listing_id).expect("listing");
            let d = featurize_document(l, &features, features.reference_time).expect("doc");
            (q, d, e.label)
        })
        .collect();
    Fixture { corpus, features, params, pairs }
}
