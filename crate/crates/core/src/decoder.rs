//! Scoring encoded `(s, r)` pairs against every candidate target.
//!
//! TwoMult scores `ẽ_r · e_t`. Tucker scores `W_c ×₁ ẽ_s ×₂ ẽ_r ×₃ e_t`,
//! with the core stored as a `[d × d²]` matrix whose row `i`, column
//! `j·d + k` holds `W_c[i, j, k]`. Targets always use raw embedding rows.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid_slice, BatchNormState, BatchStats, Mode, Tape, Var};
use crate::error::{KgeError, Result};
use crate::params::{uniform, Bound, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderKind {
    TwoMult,
    Tucker,
}

/// Which encoder output TwoMult decodes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeFrom {
    Relation,
    Source,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecoderConfig {
    pub kind: DecoderKind,
    pub decode_from: DecodeFrom,
    pub tucker_input_bn: bool,
}

impl DecoderConfig {
    /// Trainable scalars owned by the decoder for embedding width `d`.
    pub fn param_count(&self, d: usize) -> u64 {
        match self.kind {
            DecoderKind::TwoMult => 0,
            DecoderKind::Tucker => {
                let d = d as u64;
                d * d * d + if self.tucker_input_bn { 2 * d } else { 0 }
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub core: Option<ParamId>,
    pub input_bn: Option<(ParamId, ParamId)>,
}

impl Decoder {
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        config: DecoderConfig,
        d: usize,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Self {
        let (core, input_bn) = match config.kind {
            DecoderKind::TwoMult => (None, None),
            DecoderKind::Tucker => {
                let core = store.add("decoder.tucker.core", uniform(&[d, d * d], 1.0, rng));
                let bn = config.tucker_input_bn.then(|| {
                    (
                        store.add("decoder.tucker.bn.gamma", Tensor::filled(&[d], T::one())),
                        store.add("decoder.tucker.bn.beta", Tensor::zeros(&[d])),
                    )
                });
                (Some(core), bn)
            }
        };
        Decoder {
            config,
            core,
            input_bn,
        }
    }

    pub fn attach<T: Scalar>(config: DecoderConfig, store: &ParamStore<T>) -> Result<Self> {
        let id = |name: &str| {
            store
                .find(name)
                .ok_or_else(|| KgeError::Checkpoint(format!("missing parameter {name}")))
        };
        let (core, input_bn) = match config.kind {
            DecoderKind::TwoMult => (None, None),
            DecoderKind::Tucker => {
                let bn = if config.tucker_input_bn {
                    Some((id("decoder.tucker.bn.gamma")?, id("decoder.tucker.bn.beta")?))
                } else {
                    None
                };
                (Some(id("decoder.tucker.core")?), bn)
            }
        };
        Ok(Decoder {
            config,
            core,
            input_bn,
        })
    }

    /// `[B × |V|]` scores for encoded pairs.
    #[allow(clippy::too_many_arguments)]
    pub fn score<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        bound: &Bound,
        bn_state: Option<&BatchNormState<T>>,
        source: Var,
        relation: Var,
        entities: Var,
        mode: Mode,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        match self.config.kind {
            DecoderKind::TwoMult => {
                let query = match self.config.decode_from {
                    DecodeFrom::Relation => relation,
                    DecodeFrom::Source => source,
                };
                Ok((score_twomult(tape, query, entities)?, None))
            }
            DecoderKind::Tucker => {
                let core = bound.get(self.core.expect("tucker core registered"));
                let (source, stats) = match (self.input_bn, bn_state) {
                    (Some((gamma, beta)), Some(state)) => {
                        tape.batch_norm(source, bound.get(gamma), bound.get(beta), state, mode)?
                    }
                    (Some(_), None) => {
                        return Err(KgeError::Contract("tucker input batch norm has no state".into()))
                    }
                    (None, _) => (source, None),
                };
                Ok((score_tucker(tape, source, relation, core, entities)?, stats))
            }
        }
    }
}

/// `scores[b, t] = query[b] · entities[t]`.
pub fn score_twomult<T: Scalar>(tape: &mut Tape<'_, T>, query: Var, entities: Var) -> Result<Var> {
    if tape.shape(query).get(1) != tape.shape(entities).get(1) {
        return Err(KgeError::shape("score_twomult", tape.shape(query), tape.shape(entities)));
    }
    tape.matmul_t(query, entities, false, true)
}

/// `scores[b, t] = Σ_{i,j,k} W_c[i,j,k] · ẽ_s[b,i] · ẽ_r[b,j] · E[t,k]`,
/// computed as a mode-1 product (matmul), a row-wise mode-2 contraction, then
/// a matmul against `Eᵀ`.
pub fn score_tucker<T: Scalar>(
    tape: &mut Tape<'_, T>,
    source: Var,
    relation: Var,
    core: Var,
    entities: Var,
) -> Result<Var> {
    let d = tape.shape(source).get(1).copied().unwrap_or(0);
    if tape.shape(core) != [d, d * d]
        || tape.shape(relation) != tape.shape(source)
        || tape.shape(entities).get(1) != Some(&d)
    {
        return Err(KgeError::shape("score_tucker", tape.shape(core), tape.shape(entities)));
    }
    let projected = tape.matmul(source, core)?;
    let query = tape.mode_two(projected, relation)?;
    tape.matmul_t(query, entities, false, true)
}

/// Elementwise logistic sigmoid.
pub fn scores_to_probabilities<T: Scalar>(scores: &[T]) -> Vec<T> {
    sigmoid_slice(scores)
}

/// Convenience: TwoMult scores for plain arrays.
pub fn twomult_scores<T: Scalar>(query: &Tensor<T>, entities: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let q = tape.leaf(query, false);
    let e = tape.leaf(entities, false);
    let s = score_twomult(&mut tape, q, e)?;
    Ok(tape.value(s).clone())
}

/// Convenience: Tucker scores for plain arrays (`core` is `[d × d²]`).
pub fn tucker_scores<T: Scalar>(
    source: &Tensor<T>,
    relation: &Tensor<T>,
    core: &Tensor<T>,
    entities: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let s = tape.leaf(source, false);
    let r = tape.leaf(relation, false);
    let c = tape.leaf(core, false);
    let e = tape.leaf(entities, false);
    let out = score_tucker(&mut tape, s, r, c, e)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn twomult_examples() {
        let q = Tensor::from_rows(&[vec![1.0f64, 0.0]]);
        let e = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(twomult_scores(&q, &e).unwrap().data(), &[1.0, 0.0]);
        let zero = Tensor::from_rows(&[vec![0.0f64, 0.0]]);
        let s = twomult_scores(&zero, &e).unwrap();
        assert_eq!(s.data(), &[0.0, 0.0]);
        assert_eq!(scores_to_probabilities(s.data()), vec![0.5, 0.5]);
    }

    #[test]
    fn tucker_superdiagonal_is_three_way_product() {
        let d = 3;
        let mut core = Tensor::<f64>::zeros(&[d, d * d]);
        for i in 0..d {
            core.data_mut()[i * d * d + i * d + i] = 1.0;
        }
        let s = Tensor::from_rows(&[vec![1.0, 2.0, -1.0]]);
        let r = Tensor::from_rows(&[vec![0.5, -1.0, 3.0]]);
        let e = Tensor::from_rows(&[vec![1.0, 1.0, 1.0], vec![2.0, 0.0, -1.0]]);
        let out = tucker_scores(&s, &r, &core, &e).unwrap();
        let expect: Vec<f64> = (0..2)
            .map(|t| (0..d).map(|i| s.data()[i] * r.data()[i] * e.get2(t, i)).sum())
            .collect();
        assert_eq!(out.data(), expect.as_slice());
        let zero = Tensor::<f64>::zeros(&[d, d * d]);
        assert!(tucker_scores(&s, &r, &zero, &e).unwrap().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn tucker_rejects_bad_core() {
        let s = Tensor::<f64>::zeros(&[1, 3]);
        let core = Tensor::<f64>::zeros(&[3, 3]);
        let e = Tensor::<f64>::zeros(&[2, 3]);
        assert!(matches!(tucker_scores(&s, &s, &core, &e), Err(KgeError::Shape { .. })));
    }

    #[test]
    fn sigmoid_saturates_without_nan() {
        let p = scores_to_probabilities(&[20.0f64, -20.0, 0.0, -800.0, 800.0]);
        assert!((p[0] - 1.0).abs() < 1e-8);
        assert!(p[1].abs() < 1e-8);
        assert_eq!(p[2], 0.5);
        assert!(p.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn param_counts() {
        let mut c = DecoderConfig {
            kind: DecoderKind::Tucker,
            decode_from: DecodeFrom::Relation,
            tucker_input_bn: false,
        };
        assert_eq!(c.param_count(64), 262_144);
        c.kind = DecoderKind::TwoMult;
        assert_eq!(c.param_count(64), 0);
    }
}
