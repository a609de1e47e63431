//! Filtered link-prediction evaluation with random tie placement.
//!
//! Every test triple `(s, r, t)` yields two queries: the right query
//! `(s, r, ?)` and the left query `(t, r⁻¹, ?)` answered through the inverse
//! relation. Known true targets other than the one being ranked are removed
//! from the candidate list before ranking.

use std::collections::HashSet;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{derive_seed, FilterIndex, TripleStore};
use crate::error::{KgeError, Result};

/// Anything that can score `(s, r)` queries against all entities.
pub trait Scorer: Sync {
    fn num_entities(&self) -> usize;

    /// Row-major `[B × |V|]` scores.
    fn score_batch(&self, sources: &[u32], relations: &[u32]) -> Result<Vec<f64>>;
}

/// Where the true target goes among candidates with an identical score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TieProtocol {
    /// Uniformly random slot among the tied candidates.
    #[default]
    Random,
    /// Ahead of every tie (diagnostic).
    Top,
    /// Behind every tie (diagnostic).
    Bottom,
}

/// Rank (1-based) of `target` among all entities, skipping `filter`
/// members other than `target` itself.
pub fn rank_query<R: Rng + ?Sized>(
    scores: &[f64],
    target: u32,
    filter: Option<&HashSet<u32>>,
    rng: &mut R,
) -> Result<usize> {
    rank_query_with(scores, target, filter, TieProtocol::Random, rng)
}

pub fn rank_query_with<R: Rng + ?Sized>(
    scores: &[f64],
    target: u32,
    filter: Option<&HashSet<u32>>,
    protocol: TieProtocol,
    rng: &mut R,
) -> Result<usize> {
    let t = target as usize;
    if t >= scores.len() {
        return Err(KgeError::Contract(format!(
            "target {target} out of range for {} candidates",
            scores.len()
        )));
    }
    let true_score = scores[t];
    let mut higher = 0usize;
    let mut ties = 0usize;
    for (c, &s) in scores.iter().enumerate() {
        if c == t || filter.is_some_and(|f| f.contains(&(c as u32))) {
            continue;
        }
        if s > true_score {
            higher += 1;
        } else if s == true_score {
            ties += 1;
        }
    }
    let offset = match protocol {
        TieProtocol::Random => rng.gen_range(0..=ties),
        TieProtocol::Top => 0,
        TieProtocol::Bottom => ties,
    };
    Ok(1 + higher + offset)
}

/// Aggregates over one set of ranks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankMetrics {
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
    pub count: usize,
}

impl RankMetrics {
    pub fn from_ranks(ranks: &[usize]) -> Self {
        let n = ranks.len();
        if n == 0 {
            return RankMetrics {
                mrr: f64::NAN,
                hits1: f64::NAN,
                hits3: f64::NAN,
                hits10: f64::NAN,
                count: 0,
            };
        }
        let frac = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / n as f64;
        RankMetrics {
            mrr: ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n as f64,
            hits1: frac(1),
            hits3: frac(3),
            hits10: frac(10),
            count: n,
        }
    }

    pub fn has_nan(&self) -> bool {
        [self.mrr, self.hits1, self.hits3, self.hits10].iter().any(|x| x.is_nan())
    }
}

/// MRR and Hits@{1,3,10} over both directions, with the per-direction split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: RankMetrics,
    /// Source-side queries `(t, r⁻¹, ?)`.
    pub left: RankMetrics,
    /// Target-side queries `(s, r, ?)`.
    pub right: RankMetrics,
}

impl EvalReport {
    pub fn from_ranks(left: &[usize], right: &[usize]) -> Self {
        let all: Vec<usize> = left.iter().chain(right).copied().collect();
        EvalReport {
            overall: RankMetrics::from_ranks(&all),
            left: RankMetrics::from_ranks(left),
            right: RankMetrics::from_ranks(right),
        }
    }

    pub fn mrr(&self) -> f64 {
        self.overall.mrr
    }

    pub fn has_nan(&self) -> bool {
        self.overall.has_nan()
    }

    /// `direction,mrr,hits1,hits3,hits10,count` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("direction,mrr,hits1,hits3,hits10,count\n");
        for (name, m) in [("both", &self.overall), ("left", &self.left), ("right", &self.right)] {
            out.push_str(&format!(
                "{name},{:.6},{:.6},{:.6},{:.6},{}\n",
                m.mrr, m.hits1, m.hits3, m.hits10, m.count
            ));
        }
        out
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<10} {:>8} {:>8} {:>8} {:>8} {:>8}",
            "direction", "MRR", "Hits@1", "Hits@3", "Hits@10", "count"
        )?;
        for (name, m) in [("both", &self.overall), ("left", &self.left), ("right", &self.right)] {
            writeln!(
                f,
                "{:<10} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8}",
                name, m.mrr, m.hits1, m.hits3, m.hits10, m.count
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    /// Queries scored per forward pass.
    pub batch: usize,
    pub protocol: TieProtocol,
    /// Skip filtering entirely (raw setting, diagnostic).
    pub unfiltered: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            batch: 512,
            protocol: TieProtocol::Random,
            unfiltered: false,
        }
    }
}

const RIGHT: u64 = 0;
const LEFT: u64 = 1;

/// Filtered evaluation over the original triples of `split`.
///
/// The tie-breaking generator of each query is derived from
/// `(seed, triple index, direction)`, so the result does not depend on
/// batching or thread count.
pub fn evaluate<S: Scorer + ?Sized>(
    model: &S,
    split: &TripleStore,
    filter: &FilterIndex,
    seed: u64,
    options: EvalOptions,
) -> Result<EvalReport> {
    let r = split.relation_count() as u32;
    // (query source, query relation, target, triple index, direction)
    let mut queries = Vec::new();
    for (i, t) in split.originals().enumerate() {
        queries.push((t.source, t.relation, t.target, i as u64, RIGHT));
        queries.push((t.target, t.relation + r, t.source, i as u64, LEFT));
    }
    let n = model.num_entities();
    let batch = options.batch.max(1);
    let mut left = Vec::with_capacity(queries.len() / 2);
    let mut right = Vec::with_capacity(queries.len() / 2);
    for chunk in queries.chunks(batch) {
        let sources: Vec<u32> = chunk.iter().map(|q| q.0).collect();
        let relations: Vec<u32> = chunk.iter().map(|q| q.1).collect();
        let scores = model.score_batch(&sources, &relations)?;
        if scores.len() != chunk.len() * n {
            return Err(KgeError::shape("evaluate", &[scores.len()], &[chunk.len(), n]));
        }
        let ranks: Vec<Result<(u64, usize)>> = chunk
            .par_iter()
            .zip(scores.par_chunks(n))
            .map(|(&(s, rel, target, index, direction), row)| {
                let known = if options.unfiltered {
                    None
                } else {
                    Some(filter.targets(s, rel).ok_or_else(|| {
                        KgeError::Contract(format!("filter index has no entry for query ({s}, {rel})"))
                    })?)
                };
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[index, direction]));
                let rank = rank_query_with(row, target, known, options.protocol, &mut rng)?;
                Ok((direction, rank))
            })
            .collect();
        for item in ranks {
            let (direction, rank) = item?;
            if direction == LEFT {
                left.push(rank);
            } else {
                right.push(rank);
            }
        }
    }
    Ok(EvalReport::from_ranks(&left, &right))
}
