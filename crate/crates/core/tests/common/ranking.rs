//! Ranking-protocol checks shared by the ranking and acceptance suites.

use std::collections::HashSet;

use kgattn::evaluation::{rank_query, rank_query_with, TieProtocol};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::oracles::{chi_square, enumerate_tie_ranks};

/// p-value of the all-tied |V|=5 rank histogram against uniform {1..5}.
pub fn all_tied_p_value(trials: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scores = [0.25; 5];
    let mut counts = [0usize; 5];
    for _ in 0..trials {
        counts[rank_query(&scores, 3, None, &mut rng).unwrap() - 1] += 1;
    }
    let stat = chi_square(&counts, &[0.2; 5]);
    1.0 - ChiSquared::new(4.0).unwrap().cdf(stat)
}

/// Random scores over a few levels (many ties), |V| ≤ 12, random filter;
/// the tied group of the target has fewer than 8 members.
pub fn tied_instance(rng: &mut ChaCha8Rng) -> (Vec<f64>, usize, HashSet<u32>) {
    loop {
        let n = rng.gen_range(2..=12);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..4) as f64 * 0.5).collect();
        let target = rng.gen_range(0..n);
        let filter: HashSet<u32> = (0..n as u32).filter(|_| rng.gen_bool(0.3)).collect();
        let group = (0..n)
            .filter(|&c| c != target && !filter.contains(&(c as u32)) && scores[c] == scores[target])
            .count();
        if group < 8 {
            return (scores, target, filter);
        }
    }
}

/// Compares sampled filtered ranks with the exact distribution from
/// enumerating tie orderings. Returns the largest frequency deviation, or
/// an error if a rank falls outside the enumerated support or the
/// deterministic protocols miss its endpoints.
pub fn enumeration_deviation(instances: usize, trials: usize, seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (scores, target, filter) = tied_instance(&mut rng);
        let exact = enumerate_tie_ranks(&scores, target, &filter);
        let min = exact.first().unwrap().0;
        let max = exact.last().unwrap().0;
        let mut r = ChaCha8Rng::seed_from_u64(rng.gen());
        let t = target as u32;
        let top = rank_query_with(&scores, t, Some(&filter), TieProtocol::Top, &mut r).unwrap();
        let bottom = rank_query_with(&scores, t, Some(&filter), TieProtocol::Bottom, &mut r).unwrap();
        if (top, bottom) != (min, max) {
            return Err(format!("protocol endpoints {top}..{bottom} vs enumerated {min}..{max}"));
        }
        let mut counts = vec![0usize; max + 1];
        for _ in 0..trials {
            let rank = rank_query(&scores, t, Some(&filter), &mut r).unwrap();
            if !(min..=max).contains(&rank) {
                return Err(format!("rank {rank} outside enumerated support {min}..{max}"));
            }
            counts[rank] += 1;
        }
        for (rank, p) in &exact {
            worst = worst.max((counts[*rank] as f64 / trials as f64 - p).abs());
        }
    }
    Ok(worst)
}
