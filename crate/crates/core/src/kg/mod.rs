//! Knowledge graph construction and TransR embedding.

mod graph;
mod transr;

pub use graph::{
    build_graph, Catalog, EntityId, EntityKind, KnowledgeGraph, RelationId, RelationKind, Triplet,
    SEQUENTIAL,
};
pub use transr::{
    kg_loss, make_pair, negative_sample, KgPair, TransR, TransRVars, NEGATIVE_RETRIES,
};
