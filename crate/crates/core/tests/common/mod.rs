//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use std::collections::HashSet;

pub mod gradients;
pub mod oracles;
pub mod ranking;

use kgattn::autodiff::{Tape, Var};
use kgattn::data::{Dataset, Triple};
use kgattn::decoder::DecoderKind;
use kgattn::tensor::Tensor;
use kgattn::ModelConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOY_ENTITIES: usize = 20;
pub const TOY_RELATIONS: usize = 3;
pub const TOY_TRIPLES: usize = 50;

/// `count` distinct random triples without self-loops.
pub fn random_triples(entities: usize, relations: usize, count: usize, seed: u64) -> Vec<Triple> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let s = rng.gen_range(0..entities as u32);
        let t = rng.gen_range(0..entities as u32);
        let r = rng.gen_range(0..relations as u32);
        if s != t && seen.insert((s, r, t)) {
            out.push(Triple::new(s, r, t));
        }
    }
    out
}

/// 20 entities, 3 relations, 50 training triples; valid and test reuse
/// slices of train.
pub fn toy_dataset(seed: u64) -> Dataset {
    let train = random_triples(TOY_ENTITIES, TOY_RELATIONS, TOY_TRIPLES, seed);
    let valid = train[..10].to_vec();
    let test = train[10..20].to_vec();
    Dataset::from_id_triples("toy", TOY_ENTITIES, TOY_RELATIONS, train, valid, test).unwrap()
}

/// d=16, h=4 TwoMult model without dropout or label smoothing.
pub fn toy_config(lr: f64) -> ModelConfig {
    ModelConfig {
        dataset: "toy".into(),
        decoder: DecoderKind::TwoMult,
        d: 16,
        heads: 4,
        d_k: 4,
        d_v: 4,
        d_h: 32,
        do_enc: 0.0,
        do_mha: 0.0,
        do_pff: 0.0,
        do_sdp: 0.0,
        batch_size: 16,
        lr,
        decay_rate: 1.0,
        label_smoothing: 0.0,
        epochs: 200,
        eval_every: 10,
        ..ModelConfig::default()
    }
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Worst relative error between the tape gradient of `build` and central
/// differences, over every input entry. `build` maps input leaves to a
/// scalar loss.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], build: F) -> f64
where
    F: for<'a> Fn(&mut Tape<'a, f64>, &[Var]) -> Var,
{
    let eval = |values: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.leaf(v, false)).collect();
        let out = build(&mut tape, &vars);
        tape.value(out).data()[0]
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.leaf(v, true)).collect();
    let out = build(&mut tape, &vars);
    let grads = tape.backward(out).unwrap();
    let h = 1e-6;
    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; input.len()]);
        for (j, &exact) in analytic.iter().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let err = (exact - numeric).abs() / exact.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max(err);
        }
    }
    worst
}

/// Scorer backed by an explicit table: one score row per
/// `(source, relation)` query, with `relation` counting inverse ids.
pub struct TableScorer {
    pub entities: usize,
    pub relation_rows: usize,
    pub rows: Vec<Vec<f64>>,
}

impl TableScorer {
    pub fn new(entities: usize, relation_rows: usize) -> Self {
        TableScorer {
            entities,
            relation_rows,
            rows: vec![vec![0.0; entities]; entities * relation_rows],
        }
    }

    pub fn row_mut(&mut self, source: u32, relation: u32) -> &mut Vec<f64> {
        &mut self.rows[source as usize * self.relation_rows + relation as usize]
    }
}

impl kgattn::Scorer for TableScorer {
    fn num_entities(&self) -> usize {
        self.entities
    }

    fn score_batch(&self, sources: &[u32], relations: &[u32]) -> kgattn::Result<Vec<f64>> {
        Ok(sources
            .iter()
            .zip(relations)
            .flat_map(|(&s, &r)| self.rows[s as usize * self.relation_rows + r as usize].iter().copied())
            .collect())
    }
}
