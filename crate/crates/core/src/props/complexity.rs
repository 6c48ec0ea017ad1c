//! Multiply-accumulate counts and wall-clock scaling of the attention layers.
//!
//! Counts cover one observer: projections, score and weighted-sum kernels of
//! the attention layer on `n` already-embedded entities.

use crate::array::Array;
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::nn::{AttentionConfig, AttentionLayer, EntityEmbeddings};
use crate::params::ParamStore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

/// Width used for the asserted doubling ratios: narrow enough that the
/// entity-dependent terms dominate the MAC count from small `n`.
pub const RATIO_PROBE: (usize, usize) = (2, 1);
pub const RATIO_N: [usize; 4] = [8, 16, 32, 64];
pub const SAQA_RATIO: (f64, f64) = (1.9, 2.1);
pub const SA_RATIO: (f64, f64) = (3.6, 4.2);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layer {
    Saqa,
    SelfAttention,
}

impl FromStr for Layer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "saqa" => Ok(Self::Saqa),
            "self_attention" | "self-attention" | "sa" => Ok(Self::SelfAttention),
            other => Err(Error::Config(format!("unknown layer {other:?}"))),
        }
    }
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Saqa => "saqa",
            Self::SelfAttention => "self_attention",
        })
    }
}

/// A built layer plus random embeddings for `n` entities.
pub struct Probe {
    layer: AttentionLayer,
    store: ParamStore,
    rows: Array,
    n: usize,
}

impl Probe {
    pub fn new(cfg: AttentionConfig, n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let layer = AttentionLayer::new(&mut store, "probe", cfg, &mut rng);
        let data = (0..n * cfg.hidden)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Self {
            layer,
            store,
            rows: Array::matrix(n, cfg.hidden, data).expect("sized"),
            n,
        }
    }

    /// One forward pass; returns the MACs it performed.
    pub fn run(&self, which: Layer) -> Result<u64> {
        let mut g = Graph::inference();
        let own = g.input(Array::row(self.rows.row_slice(0).to_vec()));
        let all = g.input(self.rows.clone());
        let emb = EntityEmbeddings {
            own,
            all,
            groups: 1,
            slots: self.n,
            visible: vec![true; self.n],
        };
        match which {
            Layer::Saqa => {
                self.layer.saqa(&mut g, &self.store, &emb)?;
            }
            Layer::SelfAttention => {
                self.layer.self_attention(&mut g, &self.store, &emb)?;
            }
        }
        Ok(g.macs())
    }
}

pub fn mac_count(which: Layer, cfg: AttentionConfig, n: usize) -> Result<u64> {
    Probe::new(cfg, n, 0).run(which)
}

/// MACs of only the score and weighted-sum kernels.
pub fn core_mac_count(which: Layer, cfg: AttentionConfig, n: usize) -> u64 {
    let d = cfg.hidden as u64;
    let n = n as u64;
    match which {
        Layer::Saqa => 2 * n * d,
        Layer::SelfAttention => 2 * n * n * d,
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct FitReport {
    pub layer: String,
    pub hidden: usize,
    pub heads: usize,
    pub n_values: Vec<usize>,
    pub macs: Vec<u64>,
    /// `a n + b`.
    pub affine: [f64; 2],
    pub affine_max_residual: f64,
    /// `a n^2 + b n + c`.
    pub quadratic: [f64; 3],
    pub quadratic_max_residual: f64,
    /// `MAC(2n) / MAC(n)` for every `n` whose double is also measured.
    pub doubling_ratios: Vec<(usize, f64)>,
}

impl FitReport {
    pub fn ratio(&self, n: usize) -> Option<f64> {
        self.doubling_ratios
            .iter()
            .find(|(k, _)| *k == n)
            .map(|(_, r)| *r)
    }
}

/// Solve the normal equations of a polynomial least-squares fit.
fn polyfit(xs: &[f64], ys: &[f64], degree: usize) -> Vec<f64> {
    let k = degree + 1;
    // Centre and scale x for conditioning, then expand back.
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let span = xs.iter().map(|x| (x - mean).abs()).fold(1.0f64, f64::max);
    let t: Vec<f64> = xs.iter().map(|x| (x - mean) / span).collect();
    let mut a = vec![vec![0.0; k + 1]; k];
    for (ti, yi) in t.iter().zip(ys) {
        let pows: Vec<f64> = (0..k).map(|p| ti.powi(p as i32)).collect();
        for r in 0..k {
            for c in 0..k {
                a[r][c] += pows[r] * pows[c];
            }
            a[r][k] += pows[r] * yi;
        }
    }
    for col in 0..k {
        let piv = (col..k)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("rows");
        a.swap(col, piv);
        for r in 0..k {
            if r != col && a[col][col] != 0.0 {
                let f = a[r][col] / a[col][col];
                for c in col..=k {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    let coef_t: Vec<f64> = (0..k).map(|i| a[i][k] / a[i][i]).collect();
    // p(x) = sum_j c_j ((x - mean) / span)^j, expanded into powers of x.
    let mut coef = vec![0.0; k];
    for (j, cj) in coef_t.iter().enumerate() {
        for i in 0..=j {
            let binom = (1..=i).fold(1.0, |acc, l| acc * (j + 1 - l) as f64 / l as f64);
            coef[i] += cj * binom * (-mean).powi((j - i) as i32) / span.powi(j as i32);
        }
    }
    coef
}

fn max_residual(xs: &[f64], ys: &[f64], coef: &[f64]) -> f64 {
    xs.iter()
        .zip(ys)
        .map(|(x, y)| {
            let p: f64 = coef.iter().enumerate().map(|(i, c)| c * x.powi(i as i32)).sum();
            (p - y).abs()
        })
        .fold(0.0, f64::max)
}

pub fn complexity_fit(which: Layer, cfg: AttentionConfig, n_values: &[usize]) -> Result<FitReport> {
    let mut ns = n_values.to_vec();
    ns.sort_unstable();
    ns.dedup();
    if ns.len() < 4 {
        return Err(Error::Config("complexity fit needs at least 4 distinct n".into()));
    }
    let macs: Vec<u64> = ns
        .iter()
        .map(|&n| mac_count(which, cfg, n))
        .collect::<Result<_>>()?;
    let xs: Vec<f64> = ns.iter().map(|&n| n as f64).collect();
    let ys: Vec<f64> = macs.iter().map(|&c| c as f64).collect();
    let lin = polyfit(&xs, &ys, 1);
    let quad = polyfit(&xs, &ys, 2);
    let doubling_ratios = ns
        .iter()
        .zip(&macs)
        .filter_map(|(&n, &c)| {
            ns.iter()
                .position(|&k| k == 2 * n)
                .map(|p| (n, macs[p] as f64 / c as f64))
        })
        .collect();
    Ok(FitReport {
        layer: which.to_string(),
        hidden: cfg.hidden,
        heads: cfg.heads,
        n_values: ns,
        macs,
        affine: [lin[1], lin[0]],
        affine_max_residual: max_residual(&xs, &ys, &lin),
        quadratic: [quad[2], quad[1], quad[0]],
        quadratic_max_residual: max_residual(&xs, &ys, &quad),
        doubling_ratios,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TimingRow {
    pub model: String,
    pub n: usize,
    pub samples: usize,
    pub median_s: f64,
    pub q1_s: f64,
    pub q3_s: f64,
    pub iqr_s: f64,
}

pub const WARMUP_ITERS: usize = 20;

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Time single-observer forward passes: `WARMUP_ITERS` discarded runs, then
/// `samples` timed runs per `(layer, n)`.
pub fn inference_bench(
    layers: &[Layer],
    cfg: AttentionConfig,
    n_values: &[usize],
    samples: usize,
) -> Result<Vec<TimingRow>> {
    if samples == 0 {
        return Err(Error::Config("samples must be positive".into()));
    }
    let mut rows = Vec::new();
    for &layer in layers {
        for &n in n_values {
            let probe = Probe::new(cfg, n, n as u64);
            for _ in 0..WARMUP_ITERS {
                probe.run(layer)?;
            }
            let mut t = Vec::with_capacity(samples);
            for _ in 0..samples {
                let start = Instant::now();
                std::hint::black_box(probe.run(layer)?);
                t.push(start.elapsed().as_secs_f64());
            }
            t.sort_by(f64::total_cmp);
            let (q1, med, q3) = (quantile(&t, 0.25), quantile(&t, 0.5), quantile(&t, 0.75));
            rows.push(TimingRow {
                model: layer.to_string(),
                n,
                samples,
                median_s: med,
                q1_s: q1,
                q3_s: q3,
                iqr_s: q3 - q1,
            });
        }
    }
    Ok(rows)
}

pub fn write_timing_csv(path: &std::path::Path, rows: &[TimingRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Config(format!("csv: {e}")))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Config(format!("csv: {e}")))?;
    }
    w.flush()?;
    Ok(())
}
