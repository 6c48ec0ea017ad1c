//! Plain-loop reference implementations used as test oracles.
#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use spectra_core::Array;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Array {
    let data = (0..r * c).map(|_| StandardNormal.sample(rng)).collect();
    Array::matrix(r, c, data).unwrap()
}

pub fn rows(a: &Array) -> Vec<Vec<f64>> {
    (0..a.rows()).map(|i| a.row_slice(i).to_vec()).collect()
}

pub fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            for t in 0..k {
                out[i][j] += a[i][t] * b[t][j];
            }
        }
    }
    out
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row
        .iter()
        .map(|v| if v.is_finite() { (v - max).exp() } else { 0.0 })
        .collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

pub fn layer_norm(row: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
    let sd = (var + 1e-5).sqrt();
    row.iter()
        .zip(gain.iter().zip(bias))
        .map(|(v, (g, b))| (v - mean) / sd * g + b)
        .collect()
}

/// Multi-head scaled dot-product attention of `queries` over `keys` and
/// `values` (already projected), with `visible` masking key slots. Heads
/// split the columns evenly.
pub fn attention(
    queries: &[Vec<f64>],
    keys: &[Vec<f64>],
    values: &[Vec<f64>],
    visible: &[bool],
    heads: usize,
) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
    let d = queries[0].len();
    let dk = d / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut out = vec![vec![0.0; d]; queries.len()];
    let mut weights = Vec::new();
    for (qi, q) in queries.iter().enumerate() {
        let mut per_head = Vec::new();
        for h in 0..heads {
            let cols = h * dk..(h + 1) * dk;
            let scores: Vec<f64> = keys
                .iter()
                .zip(visible)
                .map(|(k, vis)| {
                    if *vis {
                        scale * cols.clone().map(|c| q[c] * k[c]).sum::<f64>()
                    } else {
                        f64::NEG_INFINITY
                    }
                })
                .collect();
            let w = softmax(&scores);
            for c in cols {
                out[qi][c] = w.iter().zip(values).map(|(wj, v)| wj * v[c]).sum();
            }
            per_head.push(w);
        }
        weights.push(per_head);
    }
    (out, weights)
}

pub fn max_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Pearson chi-square statistic and its upper-tail p-value.
pub fn chi_square_p(observed: &[f64], expected: &[f64]) -> f64 {
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    let stat: f64 = observed
        .iter()
        .zip(expected)
        .map(|(o, e)| (o - e).powi(2) / e)
        .sum();
    let dof = (observed.len() - 1) as f64;
    1.0 - ChiSquared::new(dof).unwrap().cdf(stat)
}
