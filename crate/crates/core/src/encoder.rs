//! Single Transformer block over the length-2 sequence `(source, relation)`.
//!
//! Pipeline per pair: separate batch norms for the entity and relation
//! tokens, input dropout, many-headed self-attention with a residual
//! connection, token-wise feed-forward with a residual connection, an
//! optional final layer norm and output dropout. There is no shared input
//! projection, no pre-attention layer norm and no positional encoding.
//!
//! Per-head projections are stored side by side: `W^Q` is `[d × h·d_k]`
//! where columns `i·d_k..(i+1)·d_k` are head `i`'s `W_i^Q`, and likewise for
//! `W^K` and `W^V`. Attention projections carry no bias; the FFN does.

use rand::Rng;

use crate::autodiff::{BatchNormState, BatchStats, Mode, Tape, Var};
use crate::decoder::DecoderConfig;
use crate::error::{KgeError, Result};
use crate::params::{xavier_uniform, Bound, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderConfig {
    pub d: usize,
    pub heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub d_h: usize,
    pub do_enc: f64,
    pub do_mha: f64,
    pub do_sdp: f64,
    pub do_pff: f64,
    pub final_layer_norm: bool,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.d, self.heads, self.d_k, self.d_v, self.d_h];
        if dims.contains(&0) {
            return Err(KgeError::Config(format!(
                "encoder dims must be >= 1, got d={} h={} d_k={} d_v={} d_h={}",
                self.d, self.heads, self.d_k, self.d_v, self.d_h
            )));
        }
        for (name, rate) in [
            ("do_enc", self.do_enc),
            ("do_mha", self.do_mha),
            ("do_sdp", self.do_sdp),
            ("do_pff", self.do_pff),
        ] {
            if !(0.0..1.0).contains(&rate) {
                return Err(KgeError::Config(format!("{name} = {rate} outside [0, 1)")));
            }
        }
        Ok(())
    }

    /// Same shape with every dropout disabled.
    pub fn without_dropout(mut self) -> Self {
        self.do_enc = 0.0;
        self.do_mha = 0.0;
        self.do_sdp = 0.0;
        self.do_pff = 0.0;
        self
    }
}

/// Ids of the block's weights inside a [`ParamStore`].
#[derive(Debug, Clone, Copy)]
pub struct EncoderParams {
    pub entity_bn: (ParamId, ParamId),
    pub relation_bn: (ParamId, ParamId),
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub w_1: ParamId,
    pub b_1: ParamId,
    pub w_2: ParamId,
    pub b_2: ParamId,
    pub layer_norm: Option<(ParamId, ParamId)>,
}

/// Running statistics of the two input batch norms.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBuffers<T> {
    pub entity_bn: BatchNormState<T>,
    pub relation_bn: BatchNormState<T>,
}

impl<T: Scalar> EncoderBuffers<T> {
    pub fn new(d: usize) -> Self {
        EncoderBuffers {
            entity_bn: BatchNormState::new(d),
            relation_bn: BatchNormState::new(d),
        }
    }
}

/// Batch statistics gathered by a train-mode pass.
#[derive(Debug, Clone, Default)]
pub struct EncoderStats<T> {
    pub entity: Option<BatchStats<T>>,
    pub relation: Option<BatchStats<T>>,
}

impl<T: Scalar> EncoderBuffers<T> {
    pub fn apply(&mut self, stats: &EncoderStats<T>) {
        if let Some(s) = &stats.entity {
            self.entity_bn.update(s);
        }
        if let Some(s) = &stats.relation {
            self.relation_bn.update(s);
        }
    }
}

/// Encoder outputs for a batch of pairs.
#[derive(Debug, Clone)]
pub struct Encoded<T> {
    /// `[B × d]` encoded sources ẽ_s.
    pub source: Var,
    /// `[B × d]` encoded relations ẽ_r.
    pub relation: Var,
    pub stats: EncoderStats<T>,
}

#[derive(Debug, Clone, Copy)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub params: EncoderParams,
}

impl Encoder {
    /// Registers freshly initialized weights in `store`.
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        config: EncoderConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let EncoderConfig {
            d,
            heads,
            d_k,
            d_v,
            d_h,
            ..
        } = config;
        let ones = || Tensor::filled(&[d], T::one());
        let zeros = || Tensor::zeros(&[d]);
        let entity_bn = (
            store.add("encoder.entity_bn.gamma", ones()),
            store.add("encoder.entity_bn.beta", zeros()),
        );
        let relation_bn = (
            store.add("encoder.relation_bn.gamma", ones()),
            store.add("encoder.relation_bn.beta", zeros()),
        );
        let w_q = store.add("encoder.w_q", xavier_uniform(&[d, heads * d_k], d, d_k, rng));
        let w_k = store.add("encoder.w_k", xavier_uniform(&[d, heads * d_k], d, d_k, rng));
        let w_v = store.add("encoder.w_v", xavier_uniform(&[d, heads * d_v], d, d_v, rng));
        let w_o = store.add("encoder.w_o", xavier_uniform(&[heads * d_v, d], heads * d_v, d, rng));
        let w_1 = store.add("encoder.ffn.w_1", xavier_uniform(&[d, d_h], d, d_h, rng));
        let b_1 = store.add("encoder.ffn.b_1", Tensor::zeros(&[d_h]));
        let w_2 = store.add("encoder.ffn.w_2", xavier_uniform(&[d_h, d], d_h, d, rng));
        let b_2 = store.add("encoder.ffn.b_2", Tensor::zeros(&[d]));
        let layer_norm = config.final_layer_norm.then(|| {
            (
                store.add("encoder.layer_norm.gamma", ones()),
                store.add("encoder.layer_norm.beta", zeros()),
            )
        });
        Ok(Encoder {
            config,
            params: EncoderParams {
                entity_bn,
                relation_bn,
                w_q,
                w_k,
                w_v,
                w_o,
                w_1,
                b_1,
                w_2,
                b_2,
                layer_norm,
            },
        })
    }

    /// Looks up existing weights by name (used when restoring checkpoints).
    pub fn attach<T: Scalar>(config: EncoderConfig, store: &ParamStore<T>) -> Result<Self> {
        let id = |name: &str| {
            store
                .find(name)
                .ok_or_else(|| KgeError::Checkpoint(format!("missing parameter {name}")))
        };
        let layer_norm = if config.final_layer_norm {
            Some((id("encoder.layer_norm.gamma")?, id("encoder.layer_norm.beta")?))
        } else {
            None
        };
        Ok(Encoder {
            config,
            params: EncoderParams {
                entity_bn: (id("encoder.entity_bn.gamma")?, id("encoder.entity_bn.beta")?),
                relation_bn: (id("encoder.relation_bn.gamma")?, id("encoder.relation_bn.beta")?),
                w_q: id("encoder.w_q")?,
                w_k: id("encoder.w_k")?,
                w_v: id("encoder.w_v")?,
                w_o: id("encoder.w_o")?,
                w_1: id("encoder.ffn.w_1")?,
                b_1: id("encoder.ffn.b_1")?,
                w_2: id("encoder.ffn.w_2")?,
                b_2: id("encoder.ffn.b_2")?,
                layer_norm,
            },
        })
    }

    /// Encodes `B` pairs given `[B × d]` source and relation embeddings.
    #[allow(clippy::too_many_arguments)]
    pub fn encode<T: Scalar, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_, T>,
        bound: &Bound,
        buffers: &EncoderBuffers<T>,
        source: Var,
        relation: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Encoded<T>> {
        let cfg = &self.config;
        let p = &self.params;
        if tape.shape(source) != tape.shape(relation) || tape.shape(source).get(1) != Some(&cfg.d) {
            return Err(KgeError::shape("encode", tape.shape(source), tape.shape(relation)));
        }
        let pairs = tape.shape(source)[0];

        let (xs, entity) = tape.batch_norm(
            source,
            bound.get(p.entity_bn.0),
            bound.get(p.entity_bn.1),
            &buffers.entity_bn,
            mode,
        )?;
        let (xr, relation_stats) = tape.batch_norm(
            relation,
            bound.get(p.relation_bn.0),
            bound.get(p.relation_bn.1),
            &buffers.relation_bn,
            mode,
        )?;
        let x = tape.concat_rows(xs, xr)?;
        let x = tape.dropout(x, cfg.do_enc, mode, rng)?;

        let attended = self.multi_head_attention(tape, bound, x, mode, rng)?;
        let x = tape.add(x, attended)?;

        let hidden = tape.matmul(x, bound.get(p.w_1))?;
        let hidden = tape.add_row(hidden, bound.get(p.b_1))?;
        let hidden = tape.relu(hidden);
        let hidden = tape.dropout(hidden, cfg.do_pff, mode, rng)?;
        let ffn = tape.matmul(hidden, bound.get(p.w_2))?;
        let ffn = tape.add_row(ffn, bound.get(p.b_2))?;
        let mut x = tape.add(x, ffn)?;

        if let Some((gamma, beta)) = p.layer_norm {
            x = tape.layer_norm(x, bound.get(gamma), bound.get(beta), T::from_f64_lossy(LAYER_NORM_EPS))?;
        }
        let x = tape.dropout(x, cfg.do_enc, mode, rng)?;

        Ok(Encoded {
            source: tape.slice_rows(x, 0, pairs)?,
            relation: tape.slice_rows(x, pairs, pairs)?,
            stats: EncoderStats {
                entity,
                relation: relation_stats,
            },
        })
    }

    /// Multi-head self-attention over `[2B × d]` block-layout tokens.
    pub fn multi_head_attention<T: Scalar, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_, T>,
        bound: &Bound,
        x: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        Ok(self.attention_with_probs(tape, bound, x, mode, rng)?.0)
    }

    /// Like [`Self::multi_head_attention`], also returning the post-softmax
    /// attention matrix `[(B·h·2) × 2]` (before attention dropout).
    pub fn attention_with_probs<T: Scalar, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_, T>,
        bound: &Bound,
        x: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Var, Var)> {
        let cfg = &self.config;
        let p = &self.params;
        let q = tape.matmul(x, bound.get(p.w_q))?;
        let k = tape.matmul(x, bound.get(p.w_k))?;
        let v = tape.matmul(x, bound.get(p.w_v))?;
        let logits = tape.pair_logits(q, k, cfg.heads)?;
        let scale = T::from_f64_lossy(1.0 / (cfg.d_k as f64).sqrt());
        let probs = tape.softmax_rows(logits, scale)?;
        let dropped = tape.dropout(probs, cfg.do_sdp, mode, rng)?;
        let heads = tape.pair_mix(dropped, v, cfg.heads)?;
        let out = tape.matmul(heads, bound.get(p.w_o))?;
        let out = tape.dropout(out, cfg.do_mha, mode, rng)?;
        Ok((out, probs))
    }
}

/// Trainable scalars outside the embedding tables: the encoder block plus
/// the decoder (Tucker core `d³` and its input batch norm; TwoMult adds none).
pub fn count_nonembedding_params(config: &EncoderConfig, decoder: &DecoderConfig) -> u64 {
    let EncoderConfig {
        d,
        heads,
        d_k,
        d_v,
        d_h,
        final_layer_norm,
        ..
    } = *config;
    let (d, h, d_k, d_v, d_h) = (d as u64, heads as u64, d_k as u64, d_v as u64, d_h as u64);
    let projections = h * (2 * d * d_k + d * d_v);
    let output = h * d_v * d;
    let ffn = d * d_h + d_h + d_h * d + d;
    let input_norms = 2 * 2 * d;
    let final_norm = if final_layer_norm { 2 * d } else { 0 };
    projections + output + ffn + input_norms + final_norm + decoder.param_count(d as usize)
}

/// Embedding-table scalars `(|V| + 2|R|)·d`, inverse relations included.
pub fn count_embedding_params(entities: usize, relations: usize, d: usize) -> u64 {
    ((entities + 2 * relations) * d) as u64
}
