use std::collections::{BTreeSet, HashSet};
use std::fmt::Write as _;

use indexmap::IndexSet;

use crate::data::{AttributeMap, Session};
use crate::error::{KsttError, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EntityKind {
    Item,
    AttributeValue,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EntityId {
    pub index: usize,
    pub kind: EntityKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RelationKind {
    Sequential,
    /// Index into the graph's attribute types.
    Semantic(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RelationId {
    pub index: usize,
    pub kind: RelationKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triplet {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

/// Dense item vocabulary. Items keep the order in which they were first seen.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Catalog {
    items: IndexSet<String>,
}

impl Catalog {
    pub fn from_sessions(sessions: &[Session]) -> Self {
        let mut items = IndexSet::new();
        for s in sessions {
            for c in &s.events {
                if !items.contains(&c.item) {
                    items.insert(c.item.clone());
                }
            }
        }
        Catalog { items }
    }

    pub fn from_items<I: IntoIterator<Item = S>, S: Into<String>>(items: I) -> Self {
        Catalog {
            items: items.into_iter().map(Into::into).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn index_of(&self, item: &str) -> Option<usize> {
        self.items.get_index_of(item)
    }

    pub fn name(&self, index: usize) -> &str {
        &self.items[index]
    }

    pub fn contains(&self, item: &str) -> bool {
        self.items.contains(item)
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.items.iter().map(String::as_str)
    }
}

/// Directed knowledge graph over items and attribute values.
///
/// Entities `0..num_items` are the catalog items (same indices as the
/// catalog); attribute values follow. Relation 0 is the sequential relation,
/// relation `1 + j` the semantic relation of attribute type `j`.
#[derive(Clone, Debug)]
pub struct KnowledgeGraph {
    catalog: Catalog,
    attribute_values: IndexSet<(String, String)>,
    attribute_types: Vec<String>,
    triplets: Vec<Triplet>,
    triplet_set: HashSet<(usize, usize, usize)>,
    adjacency: Tensor,
}

pub const SEQUENTIAL: RelationId = RelationId {
    index: 0,
    kind: RelationKind::Sequential,
};

/// Builds the graph from click sessions and item attributes.
///
/// Adjacent clicks `(v_t, v_{t+1})` give sequential triplets (self
/// transitions skipped); every `(item, type, value)` gives a semantic
/// triplet. Duplicates collapse.
pub fn build_graph(
    catalog: &Catalog,
    sessions: &[Session],
    attributes: &AttributeMap,
) -> Result<KnowledgeGraph> {
    let mut seq_edges = BTreeSet::new();
    for s in sessions {
        for (offset, c) in s.events.iter().enumerate() {
            if !catalog.contains(&c.item) {
                return Err(KsttError::Ingestion(format!(
                    "session {:?} offset {offset}: unknown item {:?}",
                    s.id, c.item
                )));
            }
        }
        for (offset, w) in s.events.windows(2).enumerate() {
            if w[1].timestamp < w[0].timestamp {
                return Err(KsttError::Ingestion(format!(
                    "session {:?} offset {}: timestamps decrease",
                    s.id,
                    offset + 1
                )));
            }
            let a = catalog.index_of(&w[0].item).unwrap();
            let b = catalog.index_of(&w[1].item).unwrap();
            if a != b {
                seq_edges.insert((a, b));
            }
        }
    }

    let attribute_types: Vec<String> = attributes
        .values()
        .flat_map(|set| set.iter().map(|(t, _)| t.clone()))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut attribute_values = IndexSet::new();
    let mut sem_edges = BTreeSet::new();
    for (item, attrs) in attributes {
        let head = catalog
            .index_of(item)
            .ok_or_else(|| KsttError::Ingestion(format!("attribute on unknown item {item:?}")))?;
        for pair in attrs {
            let (value_idx, _) = attribute_values.insert_full(pair.clone());
            let type_idx = attribute_types.binary_search(&pair.0).unwrap();
            sem_edges.insert((head, type_idx, value_idx));
        }
    }

    let m = catalog.len();
    let item = |index| EntityId {
        index,
        kind: EntityKind::Item,
    };
    let mut triplets: Vec<Triplet> = seq_edges
        .into_iter()
        .map(|(a, b)| Triplet {
            head: item(a),
            relation: SEQUENTIAL,
            tail: item(b),
        })
        .collect();
    triplets.extend(sem_edges.into_iter().map(|(h, j, v)| Triplet {
        head: item(h),
        relation: RelationId {
            index: 1 + j,
            kind: RelationKind::Semantic(j),
        },
        tail: EntityId {
            index: m + v,
            kind: EntityKind::AttributeValue,
        },
    }));
    Ok(KnowledgeGraph::assemble(
        catalog.clone(),
        attribute_values,
        attribute_types,
        triplets,
    ))
}

impl KnowledgeGraph {
    fn assemble(
        catalog: Catalog,
        attribute_values: IndexSet<(String, String)>,
        attribute_types: Vec<String>,
        mut triplets: Vec<Triplet>,
    ) -> Self {
        triplets.sort();
        triplets.dedup();
        let n = catalog.len() + attribute_values.len();
        let triplet_set = triplets
            .iter()
            .map(|t| (t.head.index, t.relation.index, t.tail.index))
            .collect();
        let adjacency = row_normalized_adjacency(n, &triplets);
        KnowledgeGraph {
            catalog,
            attribute_values,
            attribute_types,
            triplets,
            triplet_set,
            adjacency,
        }
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    pub fn num_items(&self) -> usize {
        self.catalog.len()
    }

    pub fn num_entities(&self) -> usize {
        self.catalog.len() + self.attribute_values.len()
    }

    pub fn num_relations(&self) -> usize {
        1 + self.attribute_types.len()
    }

    pub fn attribute_types(&self) -> &[String] {
        &self.attribute_types
    }

    pub fn triplets(&self) -> &[Triplet] {
        &self.triplets
    }

    pub fn contains(&self, head: EntityId, relation: RelationId, tail: EntityId) -> bool {
        self.triplet_set
            .contains(&(head.index, relation.index, tail.index))
    }

    /// Row-stochastic adjacency with a self-loop per entity; row `h` spreads
    /// its mass over `h` and every tail of an `h`-headed triplet.
    pub fn adjacency(&self) -> &Tensor {
        &self.adjacency
    }

    pub fn entity(&self, index: usize) -> EntityId {
        let kind = if index < self.catalog.len() {
            EntityKind::Item
        } else {
            EntityKind::AttributeValue
        };
        EntityId { index, kind }
    }

    pub fn relation(&self, index: usize) -> RelationId {
        let kind = if index == 0 {
            RelationKind::Sequential
        } else {
            RelationKind::Semantic(index - 1)
        };
        RelationId { index, kind }
    }

    /// Entity indices of the given kind, ascending.
    pub fn entities_of_kind(&self, kind: EntityKind) -> std::ops::Range<usize> {
        match kind {
            EntityKind::Item => 0..self.catalog.len(),
            EntityKind::AttributeValue => self.catalog.len()..self.num_entities(),
        }
    }

    pub fn entity_name(&self, index: usize) -> String {
        if index < self.catalog.len() {
            format!("item:{}", self.catalog.name(index))
        } else {
            let (ty, val) = &self.attribute_values[index - self.catalog.len()];
            format!("attr:{ty}:{val}")
        }
    }

    pub fn relation_name(&self, index: usize) -> String {
        if index == 0 {
            "rel:seq".to_string()
        } else {
            format!("rel:{}", self.attribute_types[index - 1])
        }
    }

    /// TSV dump with a `head_entity relation tail_entity` header.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("head_entity\trelation\ttail_entity\n");
        for t in &self.triplets {
            let _ = writeln!(
                out,
                "{}\t{}\t{}",
                self.entity_name(t.head.index),
                self.relation_name(t.relation.index),
                self.entity_name(t.tail.index)
            );
        }
        out
    }

    /// Rebuilds a graph from a TSV dump. Items are indexed in order of first
    /// appearance in the dump.
    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim_end() == "head_entity\trelation\ttail_entity" => {}
            _ => return Err(KsttError::Ingestion("triplet TSV: missing header".into())),
        }
        let mut named = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(KsttError::Ingestion(format!(
                    "triplet TSV line {}: expected 3 columns",
                    i + 1
                )));
            }
            named.push((i + 1, cols[0], cols[1], cols[2]));
        }
        let bad = |line: usize, what: &str| {
            KsttError::Ingestion(format!("triplet TSV line {line}: {what}"))
        };

        let mut items = IndexSet::new();
        let mut attribute_values = IndexSet::new();
        let mut types = BTreeSet::new();
        for &(line, h, r, t) in &named {
            let h = h
                .strip_prefix("item:")
                .ok_or_else(|| bad(line, "head must be an item"))?;
            items.insert(h.to_string());
            match (r, t.strip_prefix("item:")) {
                ("rel:seq", Some(t)) => {
                    items.insert(t.to_string());
                }
                ("rel:seq", None) => return Err(bad(line, "sequential tail must be an item")),
                (rel, _) => {
                    let ty = rel
                        .strip_prefix("rel:")
                        .ok_or_else(|| bad(line, "bad relation"))?;
                    let (tty, val) = t
                        .strip_prefix("attr:")
                        .and_then(|rest| rest.split_once(':'))
                        .ok_or_else(|| bad(line, "semantic tail must be attr:<type>:<value>"))?;
                    if tty != ty {
                        return Err(bad(line, "attribute type does not match relation"));
                    }
                    types.insert(ty.to_string());
                    attribute_values.insert((tty.to_string(), val.to_string()));
                }
            }
        }
        let catalog = Catalog { items };
        let attribute_types: Vec<String> = types.into_iter().collect();
        let m = catalog.len();
        let triplets = named
            .iter()
            .map(|&(_, h, r, t)| {
                let head = EntityId {
                    index: catalog.index_of(&h[5..]).unwrap(),
                    kind: EntityKind::Item,
                };
                if r == "rel:seq" {
                    Triplet {
                        head,
                        relation: SEQUENTIAL,
                        tail: EntityId {
                            index: catalog.index_of(&t[5..]).unwrap(),
                            kind: EntityKind::Item,
                        },
                    }
                } else {
                    let (ty, val) = t[5..].split_once(':').unwrap();
                    let j = attribute_types
                        .binary_search_by(|x| x.as_str().cmp(ty))
                        .unwrap();
                    let v = attribute_values
                        .get_index_of(&(ty.to_string(), val.to_string()))
                        .unwrap();
                    Triplet {
                        head,
                        relation: RelationId {
                            index: 1 + j,
                            kind: RelationKind::Semantic(j),
                        },
                        tail: EntityId {
                            index: m + v,
                            kind: EntityKind::AttributeValue,
                        },
                    }
                }
            })
            .collect();
        Ok(Self::assemble(
            catalog,
            attribute_values,
            attribute_types,
            triplets,
        ))
    }
}

fn row_normalized_adjacency(n: usize, triplets: &[Triplet]) -> Tensor {
    let mut adj = vec![0.0; n * n];
    for i in 0..n {
        adj[i * n + i] = 1.0;
    }
    for t in triplets {
        adj[t.head.index * n + t.tail.index] = 1.0;
    }
    for row in adj.chunks_mut(n) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= s);
    }
    Tensor::matrix(n, n, adj).expect("square adjacency")
}
