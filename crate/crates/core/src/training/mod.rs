//! Losses and the two-phase training loop.
//!
//! Every epoch first takes Adam steps on the KG loss (TransR tables only),
//! then on the recommendation loss (entity table, GCN, time encoder,
//! transformer). Both phases add `λ‖θ‖²` over the parameters they update.

mod model;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{KsttError, Result};
use crate::eval::IndexedSample;
use crate::kg::{kg_loss, make_pair, KgPair};
use crate::numerics::{clip_grad_norm, Adam, AdamConfig, ParamId, ParamStore, Tape, Var};

pub use model::{BoundModel, Kstt, KsttScorer, ModelConfig};

/// Floor applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RecLossKind {
    /// `−ln ŷ_target`.
    CrossEntropy,
    /// `−Σᵢ [yᵢ ln ŷᵢ + (1 − yᵢ) ln(1 − ŷᵢ)]` over the catalog.
    Binary,
}

impl FromStr for RecLossKind {
    type Err = KsttError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross_entropy" => Ok(Self::CrossEntropy),
            "binary" => Ok(Self::Binary),
            other => Err(KsttError::Config(format!(
                "rec_loss must be cross_entropy or binary, got {other:?}"
            ))),
        }
    }
}

impl fmt::Display for RecLossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::CrossEntropy => "cross_entropy",
            Self::Binary => "binary",
        })
    }
}

/// Logits `s · vᵢ` for every item, as a `1 × M` row. `items_t` is the
/// `d × M` transpose of the item rows.
pub fn predict_scores(tape: &mut Tape, session: Var, items_t: Var) -> Result<Var> {
    tape.matmul(session, items_t)
}

/// Loss of the distribution `y_hat` (`1 × M` or `M`) against `target`.
pub fn rec_loss(tape: &mut Tape, y_hat: Var, target: usize, kind: RecLossKind) -> Result<Var> {
    let m = tape.value(y_hat).len();
    if target >= m {
        return Err(KsttError::Contract(format!("target {target} outside a catalog of {m}")));
    }
    match kind {
        RecLossKind::CrossEntropy => {
            let p = tape.pick(y_hat, target)?;
            let l = tape.ln_floor(p, PROB_FLOOR);
            Ok(tape.scale(l, -1.0))
        }
        RecLossKind::Binary => {
            let ln_p = tape.ln_floor(y_hat, PROB_FLOOR);
            let neg = tape.scale(y_hat, -1.0);
            let q = tape.add_scalar(neg, 1.0);
            let ln_q = tape.ln_floor(q, PROB_FLOOR);
            // Σᵢ ln(1 − ŷᵢ) over all items, then swap the target's term
            let all_q = tape.sum(ln_q);
            let tq = tape.pick(ln_q, target)?;
            let tp = tape.pick(ln_p, target)?;
            let s = tape.sub(all_q, tq)?;
            let s = tape.add(s, tp)?;
            Ok(tape.scale(s, -1.0))
        }
    }
}

/// `λ · Σ ‖θ‖²` over `params`.
pub fn l2_penalty(tape: &mut Tape, params: &[Var], lambda: f64) -> Result<Var> {
    let parts: Vec<Var> = params.iter().map(|&p| tape.sum_squares(p)).collect();
    if parts.is_empty() {
        return Ok(tape.constant(crate::numerics::Tensor::scalar(0.0)));
    }
    let total = tape.add_n(&parts)?;
    Ok(tape.scale(total, lambda))
}

/// `rec + kg + λ Σ ‖θ‖²`.
pub fn joint_loss(tape: &mut Tape, rec: Var, kg: Var, params: &[Var], lambda: f64) -> Result<Var> {
    let data = tape.add(rec, kg)?;
    let reg = l2_penalty(tape, params, lambda)?;
    tape.add(data, reg)
}

/// The joint loss `L_rec + L_KG + λ‖Θ‖²` of one sample and a KG batch,
/// with dropout off and parameters read from `store`. `Θ` is every
/// parameter of the model.
pub fn joint_objective(
    tape: &mut Tape,
    model: &Kstt,
    store: &ParamStore,
    sample: &IndexedSample,
    pairs: &[KgPair],
    lambda: f64,
    kind: RecLossKind,
) -> Result<Var> {
    let bound = model.bind_store(tape, store);
    let items = model.item_representations(tape, &bound, None)?;
    let items_t = tape.transpose(items);
    let logits = model.session_logits(tape, &bound, items, items_t, sample, None)?;
    let y_hat = tape.softmax(logits)?;
    let rec = rec_loss(tape, y_hat, sample.target, kind)?;
    let kg = kg_loss(tape, &bound.kg, pairs)?;
    let mut params = bound.rec_vars();
    params.push(bound.kg.relation);
    params.extend(&bound.kg.projections);
    joint_loss(tape, rec, kg, &params, lambda)
}

/// Mean recommendation loss over `samples` in evaluation mode (no
/// dropout, no regularizer).
pub fn mean_rec_loss(model: &Kstt, samples: &[IndexedSample], kind: RecLossKind) -> Result<f64> {
    if samples.is_empty() {
        return Err(KsttError::Contract("no samples to score".into()));
    }
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let items = model.item_representations(&mut tape, &bound, None)?;
    let items_t = tape.transpose(items);
    let mut total = 0.0;
    for s in samples {
        let logits = model.session_logits(&mut tape, &bound, items, items_t, s, None)?;
        let y_hat = tape.softmax(logits)?;
        let l = rec_loss(&mut tape, y_hat, s.target, kind)?;
        total += tape.scalar_value(l);
    }
    Ok(total / samples.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub rec_batch_size: usize,
    pub kg_batch_size: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    pub seed: u64,
    /// Global gradient-norm bound per step; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub kg_phase: bool,
    pub rec_loss: RecLossKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            rec_batch_size: 256,
            kg_batch_size: 512,
            learning_rate: 1e-3,
            lambda: 1e-5,
            seed: 42,
            grad_clip: Some(5.0),
            kg_phase: true,
            rec_loss: RecLossKind::CrossEntropy,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rec_batch_size == 0 || self.kg_batch_size == 0 {
            return Err(KsttError::Config("batch sizes must be at least 1".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(KsttError::Config(format!("lambda {} must be non-negative", self.lambda)));
        }
        if !(self.learning_rate > 0.0) {
            return Err(KsttError::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// One line of the epoch log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean KG loss per triplet pair; `None` when the phase did not run.
    pub kg_loss: Option<f64>,
    /// Mean recommendation loss per sample.
    pub rec_loss: f64,
    pub wall_seconds: f64,
}

impl EpochRecord {
    pub const TSV_HEADER: &'static str = "epoch\tkg_loss\trec_loss\twall_seconds";

    pub fn to_tsv(&self) -> String {
        let kg = self.kg_loss.map_or_else(|| "NA".to_string(), |v| v.to_string());
        format!("{}\t{}\t{}\t{:.3}", self.epoch, kg, self.rec_loss, self.wall_seconds)
    }

    /// The record without its timing column, for reproducibility checks.
    pub fn deterministic_part(&self) -> (usize, Option<u64>, u64) {
        (self.epoch, self.kg_loss.map(f64::to_bits), self.rec_loss.to_bits())
    }
}

struct Optimizer {
    adam: Adam,
    clip: Option<f64>,
}

impl Optimizer {
    fn step(&mut self, model: &mut Kstt, ids: &[ParamId]) -> Result<()> {
        if let Some(max) = self.clip {
            clip_grad_norm(&mut model.store, ids, max);
        }
        self.adam.step(&mut model.store, ids)
    }
}

/// Trains `model` in place. `on_epoch` sees every record as soon as its
/// epoch finishes (for logging and checkpointing).
pub fn train(
    model: &mut Kstt,
    samples: &[IndexedSample],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &Kstt) -> Result<()>,
) -> Result<Vec<EpochRecord>> {
    config.validate()?;
    if samples.is_empty() {
        return Err(KsttError::Contract("no training samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Optimizer {
        adam: Adam::new(AdamConfig {
            lr: config.learning_rate,
            ..AdamConfig::default()
        }),
        clip: config.grad_clip,
    };
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let start = Instant::now();
        let kg_loss = if config.kg_phase {
            kg_epoch(model, config, &mut opt, &mut rng)?
        } else {
            None
        };
        let rec_loss = rec_epoch(model, samples, config, &mut opt, &mut rng)?;
        let record = EpochRecord {
            epoch,
            kg_loss,
            rec_loss,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record, model)?;
        log.push(record);
    }
    Ok(log)
}

/// One pass over the shuffled triplets. Triplets whose tail kind has a
/// single entity cannot be corrupted and are skipped.
fn kg_epoch(model: &mut Kstt, config: &TrainConfig, opt: &mut Optimizer, rng: &mut ChaCha8Rng) -> Result<Option<f64>> {
    let mut order: Vec<usize> = (0..model.graph.triplets().len()).collect();
    order.shuffle(rng);
    let ids = model.kg_param_ids();
    let (mut total, mut count) = (0.0, 0usize);
    for chunk in order.chunks(config.kg_batch_size) {
        let mut pairs: Vec<KgPair> = Vec::with_capacity(chunk.len());
        for &i in chunk {
            match make_pair(&model.graph.triplets()[i], &model.graph, rng) {
                Ok(p) => pairs.push(p),
                Err(KsttError::Sampling(_)) => {}
                Err(e) => return Err(e),
            }
        }
        if pairs.is_empty() {
            continue;
        }
        let mut tape = Tape::new();
        let vars = model.transr.bind(&mut tape, &model.store);
        let loss = kg_loss(&mut tape, &vars, &pairs)?;
        let mut params = vec![vars.entity, vars.relation];
        params.extend(&vars.projections);
        let reg = l2_penalty(&mut tape, &params, config.lambda)?;
        let objective = tape.add(loss, reg)?;
        tape.backward(objective, &mut model.store)?;
        opt.step(model, &ids)?;
        total += tape.scalar_value(loss);
        count += pairs.len();
    }
    Ok((count > 0).then(|| total / count as f64))
}

fn rec_epoch(
    model: &mut Kstt,
    samples: &[IndexedSample],
    config: &TrainConfig,
    opt: &mut Optimizer,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(rng);
    let ids = model.rec_param_ids();
    let mut total = 0.0;
    for chunk in order.chunks(config.rec_batch_size) {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let items = model.item_representations(&mut tape, &bound, Some(rng))?;
        let items_t = tape.transpose(items);
        let mut losses = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let s = &samples[i];
            let logits = model.session_logits(&mut tape, &bound, items, items_t, s, Some(rng))?;
            let y_hat = tape.softmax(logits)?;
            losses.push(rec_loss(&mut tape, y_hat, s.target, config.rec_loss)?);
        }
        let rec = tape.add_n(&losses)?;
        let params = bound.rec_vars();
        let reg = l2_penalty(&mut tape, &params, config.lambda)?;
        let objective = tape.add(rec, reg)?;
        tape.backward(objective, &mut model.store)?;
        opt.step(model, &ids)?;
        total += tape.scalar_value(rec);
    }
    Ok(total / samples.len() as f64)
}

#[cfg(test)]
mod tests;
