//! Synthetic query and listing augmentation for embedding-based marketplace
//! search: a seeded marketplace corpus, prompted query/listing generators, a
//! two-tower retrieval model trained with an in-batch contrastive loss plus a
//! hard-negative engagement loss, and the relevance metric suite used to
//! compare training mixes.

pub mod corpus;
pub mod features;
pub mod evalmetrics;
pub mod towers;
pub mod training;
pub mod synthgen;
