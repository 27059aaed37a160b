//! Stacked graph convolution over the knowledge graph.
//!
//! One layer computes `row_l2_normalize(leaky_relu(G · E · W))`. `G` is the
//! row-stochastic adjacency, so row `h` of the output mixes `h` with the
//! tails of its outgoing triplets: an item sees its successors and its
//! attribute values.

use rand_chacha::ChaCha8Rng;

use crate::error::{KsttError, Result};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var, NORM_EPS};

pub const DEFAULT_LAYERS: usize = 2;
pub const DEFAULT_SLOPE: f64 = 0.01;

#[derive(Clone, Debug)]
pub struct GcnStack {
    pub weights: Vec<ParamId>,
    pub slope: f64,
    /// Input dropout ratio, applied to every layer's input while training.
    pub dropout: f64,
}

impl GcnStack {
    /// Registers `gcn.w{l}` (Glorot-uniform, `dim × dim`) for each layer.
    pub fn init(
        store: &mut ParamStore,
        num_layers: usize,
        dim: usize,
        slope: f64,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if num_layers == 0 {
            return Err(KsttError::Config("gcn_layers must be at least 1".into()));
        }
        let weights = (0..num_layers)
            .map(|l| store.register(format!("gcn.w{l}"), Tensor::xavier(dim, dim, rng)))
            .collect::<Result<_>>()?;
        Ok(GcnStack {
            weights,
            slope,
            dropout,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.weights.clone()
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> Vec<Var> {
        self.weights.iter().map(|&w| tape.param(store, w)).collect()
    }

    /// Runs every layer. `train` enables input dropout.
    pub fn propagate(
        &self,
        tape: &mut Tape,
        adjacency: Var,
        embeddings: Var,
        weights: &[Var],
        mut train: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let mut x = embeddings;
        for &w in weights {
            if let Some(rng) = train.as_deref_mut() {
                x = tape.dropout(x, self.dropout, rng)?;
            }
            x = gcn_layer(tape, x, adjacency, w, self.slope)?;
        }
        Ok(x)
    }
}

pub fn gcn_layer(tape: &mut Tape, embeddings: Var, adjacency: Var, weight: Var, slope: f64) -> Result<Var> {
    let ge = tape.matmul(adjacency, embeddings)?;
    let gew = tape.matmul(ge, weight)?;
    let act = tape.leaky_relu(gew, slope);
    Ok(tape.row_l2_normalize(act, NORM_EPS))
}

/// Evaluation-mode propagation of plain tensors.
pub fn propagate_values(adjacency: &Tensor, embeddings: &Tensor, weights: &[&Tensor], slope: f64) -> Result<Tensor> {
    let mut tape = Tape::new();
    let g = tape.constant(adjacency.clone());
    let mut x = tape.constant(embeddings.clone());
    for w in weights {
        let w = tape.constant((*w).clone());
        x = gcn_layer(&mut tape, x, g, w, slope)?;
    }
    Ok(tape.value(x).clone())
}
