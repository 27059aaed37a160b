//! From raw sessions and attributes to a graph and indexed samples.

use crate::data::{AttributeMap, Session};
use crate::error::Result;
use crate::eval::{index_samples, split_sessions, time_split, IndexedSample};
use crate::kg::{build_graph, Catalog, KnowledgeGraph};

#[derive(Clone, Debug)]
pub struct Prepared {
    pub train_sessions: Vec<Session>,
    pub test_sessions: Vec<Session>,
    pub graph: KnowledgeGraph,
    pub train_samples: Vec<IndexedSample>,
    pub test_samples: Vec<IndexedSample>,
    /// Test samples dropped because their target or whole prefix is unseen.
    pub dropped_test_samples: usize,
    /// Attribute rows for items outside the training catalog.
    pub dropped_attributes: usize,
}

/// Keeps only the attributes of catalog items; returns the number removed.
pub fn restrict_attributes(attributes: &AttributeMap, catalog: &Catalog) -> (AttributeMap, usize) {
    let mut dropped = 0;
    let kept = attributes
        .iter()
        .filter(|(item, set)| {
            let keep = catalog.contains(item);
            if !keep {
                dropped += set.len();
            }
            keep
        })
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    (kept, dropped)
}

/// Time-splits `sessions`, builds the catalog and graph from the training
/// part, and expands both parts into prefix samples. With `use_attributes`
/// off the graph holds sequential edges only.
pub fn prepare(
    sessions: &[Session],
    attributes: &AttributeMap,
    test_fraction: f64,
    use_attributes: bool,
) -> Result<Prepared> {
    let (train_sessions, test_sessions) = time_split(sessions, test_fraction)?;
    let catalog = Catalog::from_sessions(&train_sessions);
    let (attrs, dropped_attributes) = if use_attributes {
        restrict_attributes(attributes, &catalog)
    } else {
        (AttributeMap::new(), 0)
    };
    let graph = build_graph(&catalog, &train_sessions, &attrs)?;
    let (train, _) = split_sessions(&train_sessions);
    let (train_samples, _) = index_samples(&train, &catalog);
    let (test, _) = split_sessions(&test_sessions);
    let (test_samples, dropped_test_samples) = index_samples(&test, &catalog);
    Ok(Prepared {
        train_sessions,
        test_sessions,
        graph,
        train_samples,
        test_samples,
        dropped_test_samples,
        dropped_attributes,
    })
}

/// Builds the graph a checkpoint was trained on. Graph construction is
/// deterministic, so the same files and settings give the same entity order.
pub fn rebuild_graph(
    sessions: &[Session],
    attributes: &AttributeMap,
    test_fraction: f64,
    use_attributes: bool,
) -> Result<KnowledgeGraph> {
    Ok(prepare(sessions, attributes, test_fraction, use_attributes)?.graph)
}
