//! Brute-force reference implementations.

use kgattn::decoder::{tucker_scores, twomult_scores};
use kgattn::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::random_tensor;

pub fn twomult_oracle(q: &Tensor<f64>, e: &Tensor<f64>) -> Vec<f64> {
    let (b, d) = q.rows_cols();
    let n = e.shape()[0];
    let mut out = Vec::with_capacity(b * n);
    for i in 0..b {
        for t in 0..n {
            let mut s = 0.0;
            for k in 0..d {
                s += q.get2(i, k) * e.get2(t, k);
            }
            out.push(s);
        }
    }
    out
}

/// Core stored `[d × d²]` with `W[i, j, k]` at row `i`, column `j·d + k`.
pub fn tucker_oracle(s: &Tensor<f64>, r: &Tensor<f64>, core: &Tensor<f64>, e: &Tensor<f64>) -> Vec<f64> {
    let (b, d) = s.rows_cols();
    let n = e.shape()[0];
    let mut out = Vec::with_capacity(b * n);
    for row in 0..b {
        for t in 0..n {
            let mut acc = 0.0;
            for i in 0..d {
                for j in 0..d {
                    for k in 0..d {
                        acc += core.get2(i, j * d + k) * s.get2(row, i) * r.get2(row, j) * e.get2(t, k);
                    }
                }
            }
            out.push(acc);
        }
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Returns the worst deviation over 200 random instances of each decoder.
pub fn worst_decoder_deviation() -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut two, mut tuck) = (0.0f64, 0.0f64);
    for _ in 0..200 {
        let d = rng.gen_range(1..=6);
        let b = rng.gen_range(1..=4);
        let n = rng.gen_range(2..=9);
        let q = random_tensor(&[b, d], &mut rng);
        let r = random_tensor(&[b, d], &mut rng);
        let e = random_tensor(&[n, d], &mut rng);
        let core = random_tensor(&[d, d * d], &mut rng);
        two = two.max(max_abs_diff(twomult_scores(&q, &e).unwrap().data(), &twomult_oracle(&q, &e)));
        tuck = tuck.max(max_abs_diff(
            tucker_scores(&q, &r, &core, &e).unwrap().data(),
            &tucker_oracle(&q, &r, &core, &e),
        ));
    }
    (two, tuck)
}


/// Exact rank distribution of `target` under uniform random placement
/// among equal scores, by enumerating every ordering of the tied group.
/// Returns `(rank, probability)` pairs.
pub fn enumerate_tie_ranks(
    scores: &[f64],
    target: usize,
    filter: &std::collections::HashSet<u32>,
) -> Vec<(usize, f64)> {
    let candidates: Vec<usize> = (0..scores.len())
        .filter(|&c| c == target || !filter.contains(&(c as u32)))
        .collect();
    let higher = candidates.iter().filter(|&&c| scores[c] > scores[target]).count();
    let mut group: Vec<usize> = candidates
        .iter()
        .copied()
        .filter(|&c| scores[c] == scores[target])
        .collect();
    let mut counts = vec![0usize; candidates.len() + 1];
    let mut total = 0usize;
    permute(&mut group, 0, &mut |order| {
        let pos = order.iter().position(|&c| c == target).unwrap();
        counts[higher + pos + 1] += 1;
        total += 1;
    });
    counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .map(|(r, &c)| (r, c as f64 / total as f64))
        .collect()
}

fn permute(items: &mut Vec<usize>, k: usize, visit: &mut dyn FnMut(&[usize])) {
    if k == items.len() {
        visit(items);
        return;
    }
    for i in k..items.len() {
        items.swap(k, i);
        permute(items, k + 1, visit);
        items.swap(k, i);
    }
}

/// Pearson χ² statistic of observed counts against expected probabilities.
pub fn chi_square(observed: &[usize], expected: &[f64]) -> f64 {
    let n: usize = observed.iter().sum();
    observed
        .iter()
        .zip(expected)
        .map(|(&o, &p)| {
            let e = p * n as f64;
            (o as f64 - e).powi(2) / e
        })
        .sum()
}
