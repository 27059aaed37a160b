use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Click;
use crate::error::{KsttError, Result};
use crate::eval::{IndexedSample, SessionScorer};
use crate::gnn::{GcnStack, DEFAULT_LAYERS, DEFAULT_SLOPE};
use crate::kg::{KnowledgeGraph, TransR, TransRVars};
use crate::numerics::{checkpoint, ParamId, ParamStore, Tape, Tensor, Var};
use crate::session_encoder::{behavior_embed, resolve_clicks, Layer, Readout, SessionEncoder, TransformerConfig};
use crate::time_enc::{TimeEncoder, TimeEncoderConfig, TimeEncoderKind, TimeVars, DEFAULT_BUCKETS, DEFAULT_FREQUENCIES};

use super::predict_scores;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub dim: usize,
    pub gcn_layers: usize,
    pub leaky_slope: f64,
    pub dropout: f64,
    pub time_encoder: TimeEncoderKind,
    pub tbe_buckets: usize,
    pub mte_frequencies: usize,
    pub mte_harmonics: Option<usize>,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub readout: Readout,
}

impl ModelConfig {
    pub fn new(dim: usize) -> Self {
        ModelConfig {
            dim,
            gcn_layers: DEFAULT_LAYERS,
            leaky_slope: DEFAULT_SLOPE,
            dropout: 0.1,
            time_encoder: TimeEncoderKind::Tbe,
            tbe_buckets: DEFAULT_BUCKETS,
            mte_frequencies: DEFAULT_FREQUENCIES,
            mte_harmonics: None,
            layers: 1,
            heads: 2,
            ffn_dim: 4 * dim,
            readout: Readout::Last,
        }
    }

    pub fn time_config(&self) -> TimeEncoderConfig {
        TimeEncoderConfig {
            kind: self.time_encoder,
            dim: self.dim,
            buckets: self.tbe_buckets,
            frequencies: self.mte_frequencies,
            harmonics: self.mte_harmonics,
        }
    }

    pub fn transformer_config(&self) -> TransformerConfig {
        TransformerConfig {
            dim: self.dim,
            heads: self.heads,
            layers: self.layers,
            ffn_dim: self.ffn_dim,
            dropout: self.dropout,
            readout: self.readout,
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::new(100)
    }
}

/// The full model: graph, parameters and the modules that read them.
#[derive(Clone, Debug)]
pub struct Kstt {
    pub config: ModelConfig,
    pub graph: KnowledgeGraph,
    pub store: ParamStore,
    pub transr: TransR,
    pub gcn: GcnStack,
    pub time: TimeEncoder,
    pub encoder: SessionEncoder,
}

/// Every parameter of a `Kstt` bound to one tape.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub kg: TransRVars,
    pub gcn: Vec<Var>,
    pub time: TimeVars,
    pub encoder: Vec<Layer<Var>>,
}

impl BoundModel {
    /// Bound counterparts of `Kstt::rec_param_ids`, in the same order.
    pub fn rec_vars(&self) -> Vec<Var> {
        let mut vars = vec![self.kg.entity];
        vars.extend(&self.gcn);
        vars.extend(self.time.vars());
        vars.extend(self.encoder.iter().flat_map(|l| l.all()));
        vars
    }
}

impl Kstt {
    /// Initializes all parameters from `seed`. Registration order (and hence
    /// checkpoint order) is KG, GCN, time encoder, transformer.
    pub fn new(graph: KnowledgeGraph, config: ModelConfig, seed: u64) -> Result<Self> {
        if config.dim == 0 {
            return Err(KsttError::Config("dim must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&config.leaky_slope) || config.leaky_slope == 0.0 {
            return Err(KsttError::Config(format!("leaky_slope {} outside (0, 1)", config.leaky_slope)));
        }
        if graph.num_items() == 0 {
            return Err(KsttError::Contract("cannot build a model over an empty catalog".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let transr = TransR::init(&mut store, graph.num_entities(), graph.num_relations(), config.dim, &mut rng)?;
        let gcn = GcnStack::init(
            &mut store,
            config.gcn_layers,
            config.dim,
            config.leaky_slope,
            config.dropout,
            &mut rng,
        )?;
        let time = TimeEncoder::init(&mut store, &config.time_config(), &mut rng)?;
        let encoder = SessionEncoder::init(&mut store, config.transformer_config(), &mut rng)?;
        Ok(Kstt {
            config,
            graph,
            store,
            transr,
            gcn,
            time,
            encoder,
        })
    }

    pub fn num_items(&self) -> usize {
        self.graph.num_items()
    }

    /// Parameters touched by the KG loss.
    pub fn kg_param_ids(&self) -> Vec<ParamId> {
        self.transr.param_ids()
    }

    /// Parameters touched by the recommendation loss: entity table, GCN,
    /// time encoder and transformer.
    pub fn rec_param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.transr.entity];
        ids.extend(self.gcn.param_ids());
        ids.extend(self.time.param_ids());
        ids.extend(self.encoder.param_ids());
        ids
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        self.bind_store(tape, &self.store)
    }

    /// Binds parameters from `store`, which must share this model's layout
    /// (e.g. a perturbed copy of `self.store`).
    pub fn bind_store(&self, tape: &mut Tape, store: &ParamStore) -> BoundModel {
        BoundModel {
            kg: self.transr.bind(tape, store),
            gcn: self.gcn.bind(tape, store),
            time: self.time.bind(tape, store),
            encoder: self.encoder.bind(tape, store),
        }
    }

    /// Post-GCN item rows (`M × d`).
    pub fn item_representations(&self, tape: &mut Tape, bound: &BoundModel, train: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let g = tape.constant(self.graph.adjacency().clone());
        let all = self.gcn.propagate(tape, g, bound.kg.entity, &bound.gcn, train)?;
        tape.slice_rows(all, 0, self.num_items())
    }

    /// `1 × M` logits for one prefix. `items` and `items_t` are the item
    /// rows and their transpose.
    pub fn session_logits(
        &self,
        tape: &mut Tape,
        bound: &BoundModel,
        items: Var,
        items_t: Var,
        sample: &IndexedSample,
        train: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let x = behavior_embed(tape, items, &sample.items, &sample.deltas, &self.time, &bound.time)?;
        let s = self.encoder.encode(tape, &bound.encoder, x, train)?.repr;
        predict_scores(tape, s, items_t)
    }

    /// Evaluation-mode item rows.
    pub fn item_embeddings(&self) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let items = self.item_representations(&mut tape, &bound, None)?;
        Ok(tape.value(items).clone())
    }

    /// A scorer with the item rows computed once.
    pub fn scorer(&self) -> Result<KsttScorer<'_>> {
        Ok(KsttScorer {
            model: self,
            items: self.item_embeddings()?,
        })
    }

    /// Catalog items with their probabilities for the session `clicks` as of
    /// `t_hat`, most probable first.
    pub fn predict(&self, clicks: &[Click], t_hat: i64) -> Result<Vec<(String, f64)>> {
        if clicks.is_empty() {
            return Err(KsttError::Contract("cannot predict from an empty session".into()));
        }
        let (items, deltas) = resolve_clicks(self.graph.catalog(), clicks, t_hat)?;
        let sample = IndexedSample {
            items,
            deltas,
            target: 0,
        };
        let scorer = self.scorer()?;
        let logits = scorer.score(&sample)?;
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
        Ok(crate::eval::rank_items(&logits)
            .into_iter()
            .map(|i| {
                let name = self.graph.catalog().name(i).to_string();
                (name, (logits[i] - mx).exp() / z)
            })
            .collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(&self.store, path)
    }

    /// Replaces every parameter with the checkpoint's values. The checkpoint
    /// must hold exactly this model's parameter names and shapes.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let records = checkpoint::load(path)?;
        self.store.load_values(records)
    }
}

pub struct KsttScorer<'a> {
    model: &'a Kstt,
    items: Tensor,
}

impl KsttScorer<'_> {
    pub fn item_embeddings(&self) -> &Tensor {
        &self.items
    }
}

impl SessionScorer for KsttScorer<'_> {
    fn num_items(&self) -> usize {
        self.model.num_items()
    }

    /// Logits `s · vᵢ`; softmax is monotone, so ranking by logits is ranking
    /// by probability.
    fn score(&self, sample: &IndexedSample) -> Result<Vec<f64>> {
        let m = self.model;
        let mut tape = Tape::new();
        let items = tape.constant(self.items.clone());
        let items_t = tape.transpose(items);
        let time = m.time.bind(&mut tape, &m.store);
        let encoder = m.encoder.bind(&mut tape, &m.store);
        let x = behavior_embed(&mut tape, items, &sample.items, &sample.deltas, &m.time, &time)?;
        let s = m.encoder.encode(&mut tape, &encoder, x, None)?.repr;
        let logits = predict_scores(&mut tape, s, items_t)?;
        Ok(tape.value(logits).data().to_vec())
    }
}
