//! TransR triplet scoring and the pairwise KG loss.
//!
//! `g_r(h, t) = ‖M_r e_h + e_r − M_r e_t‖²`; lower means more plausible. The
//! loss is `Σ −ln σ(g_r(h, t′) − g_r(h, t))` over (positive, corrupted) pairs.

use indexmap::IndexMap;
use rand::Rng;

use super::graph::{EntityId, KnowledgeGraph, RelationId, Triplet};
use crate::error::{KsttError, Result};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};

/// Retries before accepting a corrupted tail that happens to be a true triplet.
pub const NEGATIVE_RETRIES: usize = 100;

/// Handles to the TransR tables inside a `ParamStore`.
#[derive(Clone, Debug)]
pub struct TransR {
    pub entity: ParamId,
    pub relation: ParamId,
    pub projections: Vec<ParamId>,
    pub dim: usize,
}

/// TransR tables bound to one tape.
#[derive(Clone, Debug)]
pub struct TransRVars {
    pub entity: Var,
    pub relation: Var,
    pub projections: Vec<Var>,
}

/// A positive triplet and its corrupted tail.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KgPair {
    pub head: usize,
    pub relation: usize,
    pub tail: usize,
    pub negative_tail: usize,
}

impl TransR {
    /// Entity and relation vectors uniform in `±6/√d`; projections are the
    /// identity plus `±0.01` noise.
    pub fn init(
        store: &mut ParamStore,
        num_entities: usize,
        num_relations: usize,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let bound = 6.0 / (dim as f64).sqrt();
        let entity = store.register(
            "kg.entity",
            Tensor::uniform(&[num_entities, dim], -bound, bound, rng),
        )?;
        let relation = store.register(
            "kg.relation",
            Tensor::uniform(&[num_relations, dim], -bound, bound, rng),
        )?;
        let projections = (0..num_relations)
            .map(|r| {
                let mut m = Tensor::identity(dim);
                m.data_mut()
                    .iter_mut()
                    .for_each(|x| *x += rng.gen_range(-0.01..0.01));
                store.register(format!("kg.projection.{r}"), m)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TransR {
            entity,
            relation,
            projections,
            dim,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.entity, self.relation];
        ids.extend(&self.projections);
        ids
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> TransRVars {
        TransRVars {
            entity: tape.param(store, self.entity),
            relation: tape.param(store, self.relation),
            projections: self
                .projections
                .iter()
                .map(|&p| tape.param(store, p))
                .collect(),
        }
    }

    /// Score of a single triplet as a differentiable scalar.
    pub fn score(
        &self,
        tape: &mut Tape,
        vars: &TransRVars,
        h: EntityId,
        r: RelationId,
        t: EntityId,
    ) -> Result<Var> {
        let scores = relation_scores(tape, vars, r.index, &[h.index], &[t.index])?;
        tape.pick(scores, 0)
    }

    pub fn score_value(
        &self,
        store: &ParamStore,
        h: EntityId,
        r: RelationId,
        t: EntityId,
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, store);
        let s = self.score(&mut tape, &vars, h, r, t)?;
        Ok(tape.scalar_value(s))
    }
}

/// Scores of `(heads[i], r, tails[i])` for one relation, as a rank-1 tensor.
fn relation_scores(
    tape: &mut Tape,
    vars: &TransRVars,
    relation: usize,
    heads: &[usize],
    tails: &[usize],
) -> Result<Var> {
    let m = *vars
        .projections
        .get(relation)
        .ok_or_else(|| KsttError::Lookup(format!("relation {relation} has no projection")))?;
    let h = tape.gather_rows(vars.entity, heads)?;
    let t = tape.gather_rows(vars.entity, tails)?;
    let r = tape.gather_rows(vars.relation, &[relation])?;
    // rows are entities, so M_r e is e · M_rᵀ; M_r h − M_r t = (h − t) M_rᵀ
    let diff = tape.sub(h, t)?;
    let mt = tape.transpose(m);
    let proj = tape.matmul(diff, mt)?;
    let resid = tape.add_row(proj, r)?;
    let sq = tape.mul(resid, resid)?;
    Ok(tape.row_sums(sq))
}

/// `Σ −ln σ(g_r(h, t′) − g_r(h, t))` over the batch.
pub fn kg_loss(tape: &mut Tape, vars: &TransRVars, batch: &[KgPair]) -> Result<Var> {
    if batch.is_empty() {
        return Err(KsttError::Contract(
            "kg_loss needs a non-empty batch".into(),
        ));
    }
    let mut groups: IndexMap<usize, Vec<&KgPair>> = IndexMap::new();
    for p in batch {
        groups.entry(p.relation).or_default().push(p);
    }
    let mut parts = Vec::with_capacity(groups.len());
    for (rel, pairs) in groups {
        let heads: Vec<usize> = pairs.iter().map(|p| p.head).collect();
        let pos: Vec<usize> = pairs.iter().map(|p| p.tail).collect();
        let neg: Vec<usize> = pairs.iter().map(|p| p.negative_tail).collect();
        let g_pos = relation_scores(tape, vars, rel, &heads, &pos)?;
        let g_neg = relation_scores(tape, vars, rel, &heads, &neg)?;
        let margin = tape.sub(g_neg, g_pos)?;
        let l = tape.neg_log_sigmoid(margin);
        parts.push(tape.sum(l));
    }
    tape.add_n(&parts)
}

/// Replaces the tail of `triplet` with a different entity of the same kind,
/// preferring corruptions that are not themselves in the graph.
pub fn negative_sample(
    triplet: &Triplet,
    graph: &KnowledgeGraph,
    rng: &mut impl Rng,
) -> Result<Triplet> {
    let candidates = graph.entities_of_kind(triplet.tail.kind);
    let n = candidates.len();
    if n < 2 {
        return Err(KsttError::Sampling(format!(
            "cannot corrupt {:?}: only {n} entity of that kind",
            graph.entity_name(triplet.tail.index)
        )));
    }
    let draw = |rng: &mut dyn rand::RngCore| {
        // uniform over the n - 1 candidates other than the true tail
        let k = candidates.start + rng.gen_range(0..n - 1);
        if k >= triplet.tail.index {
            k + 1
        } else {
            k
        }
    };
    let mut t = draw(rng);
    for _ in 1..NEGATIVE_RETRIES {
        if !graph.contains(triplet.head, triplet.relation, graph.entity(t)) {
            break;
        }
        t = draw(rng);
    }
    Ok(Triplet {
        tail: graph.entity(t),
        ..*triplet
    })
}

pub fn make_pair(triplet: &Triplet, graph: &KnowledgeGraph, rng: &mut impl Rng) -> Result<KgPair> {
    let neg = negative_sample(triplet, graph, rng)?;
    Ok(KgPair {
        head: triplet.head.index,
        relation: triplet.relation.index,
        tail: triplet.tail.index,
        negative_tail: neg.tail.index,
    })
}
