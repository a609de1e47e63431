//! Embedding tables + encoder block + decoder, wired onto a tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BatchNormState, BatchStats, Mode, Tape, Var};
use crate::config::ModelConfig;
use crate::decoder::Decoder;
use crate::encoder::{Encoder, EncoderBuffers, EncoderStats};
use crate::error::{KgeError, Result};
use crate::evaluation::Scorer;
use crate::params::{xavier_uniform, Bound, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Non-trainable running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Buffers<T> {
    pub encoder: EncoderBuffers<T>,
    pub tucker_bn: Option<BatchNormState<T>>,
}

/// Batch statistics from one train-mode forward pass.
#[derive(Debug, Clone, Default)]
pub struct ForwardStats<T> {
    pub encoder: EncoderStats<T>,
    pub tucker_bn: Option<BatchStats<T>>,
}

pub struct Forward<T> {
    /// `[B × |V|]` raw scores.
    pub scores: Var,
    pub bound: Bound,
    pub stats: ForwardStats<T>,
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub store: ParamStore<T>,
    pub buffers: Buffers<T>,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub entity_table: ParamId,
    pub relation_table: ParamId,
    num_entities: usize,
    num_relations: usize,
}

impl<T: Scalar> Model<T> {
    /// Fresh model for `entities` entities and `relations` original relations
    /// (the relation table holds `2·relations` rows for the inverses).
    pub fn new(config: &ModelConfig, entities: usize, relations: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d;
        let mut store = ParamStore::new();
        let entity_table = store.add(
            "embedding.entity",
            xavier_uniform(&[entities, d], entities, d, &mut rng),
        );
        let relation_table = store.add(
            "embedding.relation",
            xavier_uniform(&[2 * relations, d], 2 * relations, d, &mut rng),
        );
        let encoder = Encoder::init(config.encoder_config(), &mut store, &mut rng)?;
        let decoder = Decoder::init(config.decoder_config(), d, &mut store, &mut rng);
        let buffers = Buffers {
            encoder: EncoderBuffers::new(d),
            tucker_bn: decoder.input_bn.map(|_| BatchNormState::new(d)),
        };
        Ok(Model {
            store,
            buffers,
            encoder,
            decoder,
            entity_table,
            relation_table,
            num_entities: entities,
            num_relations: 2 * relations,
        })
    }

    /// Rebuilds a model around an existing parameter store.
    pub fn from_parts(config: &ModelConfig, store: ParamStore<T>, buffers: Buffers<T>) -> Result<Self> {
        let encoder = Encoder::attach(config.encoder_config(), &store)?;
        let decoder = Decoder::attach(config.decoder_config(), &store)?;
        let entity_table = store
            .find("embedding.entity")
            .ok_or_else(|| KgeError::Checkpoint("missing embedding.entity".into()))?;
        let relation_table = store
            .find("embedding.relation")
            .ok_or_else(|| KgeError::Checkpoint("missing embedding.relation".into()))?;
        let num_entities = store.get(entity_table).shape()[0];
        let num_relations = store.get(relation_table).shape()[0];
        Ok(Model {
            store,
            buffers,
            encoder,
            decoder,
            entity_table,
            relation_table,
            num_entities,
            num_relations,
        })
    }

    pub fn num_entities(&self) -> usize {
        self.num_entities
    }

    /// Rows of the relation table (original plus inverse relations).
    pub fn num_relations(&self) -> usize {
        self.num_relations
    }

    /// Builds the graph from `(s, r)` ids to `[B × |V|]` scores.
    pub fn forward<'a, R: Rng + ?Sized>(
        &'a self,
        tape: &mut Tape<'a, T>,
        sources: &[u32],
        relations: &[u32],
        mode: Mode,
        rng: &mut R,
        requires_grad: bool,
    ) -> Result<Forward<T>> {
        if sources.len() != relations.len() {
            return Err(KgeError::shape("forward", &[sources.len()], &[relations.len()]));
        }
        let bound = self.store.bind(tape, requires_grad);
        let s_idx: Vec<usize> = sources.iter().map(|&s| s as usize).collect();
        let r_idx: Vec<usize> = relations.iter().map(|&r| r as usize).collect();
        let entities = bound.get(self.entity_table);
        let e_s = tape.gather_rows(entities, &s_idx)?;
        let e_r = tape.gather_rows(bound.get(self.relation_table), &r_idx)?;
        let encoded = self
            .encoder
            .encode(tape, &bound, &self.buffers.encoder, e_s, e_r, mode, rng)?;
        let (scores, tucker_bn) = self.decoder.score(
            tape,
            &bound,
            self.buffers.tucker_bn.as_ref(),
            encoded.source,
            encoded.relation,
            entities,
            mode,
        )?;
        Ok(Forward {
            scores,
            bound,
            stats: ForwardStats {
                encoder: encoded.stats,
                tucker_bn,
            },
        })
    }

    pub fn apply_stats(&mut self, stats: &ForwardStats<T>) {
        self.buffers.encoder.apply(&stats.encoder);
        if let (Some(state), Some(s)) = (self.buffers.tucker_bn.as_mut(), stats.tucker_bn.as_ref()) {
            state.update(s);
        }
    }

    /// Eval-mode scores as a `[B × |V|]` tensor.
    pub fn score_queries(&self, sources: &[u32], relations: &[u32]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        // eval mode never draws from the generator
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fwd = self.forward(&mut tape, sources, relations, Mode::Eval, &mut rng, false)?;
        Ok(tape.value(fwd.scores).clone())
    }
}

impl<T: Scalar> Scorer for Model<T> {
    fn num_entities(&self) -> usize {
        self.num_entities
    }

    fn score_batch(&self, sources: &[u32], relations: &[u32]) -> Result<Vec<f64>> {
        let scores = self.score_queries(sources, relations)?;
        Ok(scores.data().iter().map(|x| x.to_f64_lossy()).collect())
    }
}
