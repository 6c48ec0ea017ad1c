//! Mixing networks that combine per-agent action values into `q_joint`.
//!
//! * VDN: `q_joint = sum_i q_i`.
//! * ST-HyperNet mixer: two permutation-equivariant hypernetworks read the
//!   per-agent state rows and emit the weights and biases of a two-layer
//!   monotonic mixer. Nothing in its parameter set depends on `m`.
//! * QMIX: the classic fixed-size mixer whose MLP hypernetworks read the
//!   flattened global state. Its parameter shapes depend on `m`.
//!
//! Batched forms take `q` as `[S, m]` and the states as `[S*m, d_s]` for
//! `S` independent samples and return `[S, 1]`.

use crate::array::Array;
use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::Linear;
use crate::params::{ParamId, ParamStore};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Per-agent state rows `s_i`, `[m, d_s]`, ally-indexed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalState {
    pub rows: Array,
}

impl GlobalState {
    pub fn agents(&self) -> usize {
        self.rows.rows()
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MixerKind {
    Vdn,
    Spectra,
    Qmix,
}

impl FromStr for MixerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vdn" => Ok(Self::Vdn),
            "spectra" | "st-hypernet" => Ok(Self::Spectra),
            "qmix" => Ok(Self::Qmix),
            other => Err(Error::Config(format!("unknown mixer kind {other:?}"))),
        }
    }
}

impl fmt::Display for MixerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Vdn => "vdn",
            Self::Spectra => "spectra",
            Self::Qmix => "qmix",
        })
    }
}

/// `sum_i q_i`.
pub fn vdn_mix(q: &[f64]) -> Result<f64> {
    if q.is_empty() {
        return Err(Error::Empty("vdn_mix needs at least one agent"));
    }
    Ok(q.iter().sum())
}

/// What the query side of an ST-HyperNet weight head reads.
#[derive(Clone, Debug)]
pub enum WeightQuery {
    /// `[d_s, d_mix]` map applied to every state row: an `m x m` weight.
    State(ParamId),
    /// `[1, d_mix]` learnable seed: one weight per agent.
    Seed(ParamId),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HyperMode {
    Weights,
    Bias,
}

/// Set-transformer style hypernetwork.
///
/// Weights: `W[i][j] = sum_k |q_i^(k) . k_j^(k)| / (n_h sqrt(d_mix / n_h))`
/// with `q_i = s_i W_Q`, `k_j = s_j W_K`. Bias:
/// `b[i] = sum_k seed^(k) . (s_i W_Kb)^(k) / (n_h sqrt(d_mix))`.
#[derive(Clone, Debug)]
pub struct StHyperNet {
    pub weight_query: WeightQuery,
    pub weight_key: ParamId,
    pub bias_seed: ParamId,
    pub bias_key: ParamId,
    pub state_dim: usize,
    pub embed: usize,
    pub heads: usize,
}

impl StHyperNet {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        state_dim: usize,
        embed: usize,
        heads: usize,
        seed_weights: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || embed % heads != 0 {
            return Err(Error::Config(format!(
                "{heads} mixing heads do not divide embed {embed}"
            )));
        }
        let seed_std = (1.0 / (embed / heads) as f64).sqrt();
        let weight_query = if seed_weights {
            WeightQuery::Seed(store.add_normal(format!("{name}.weight_seed"), 1, embed, seed_std, rng))
        } else {
            WeightQuery::State(store.add_uniform(
                format!("{name}.weight_query"),
                state_dim,
                embed,
                state_dim,
                rng,
            ))
        };
        Ok(Self {
            weight_query,
            weight_key: store.add_uniform(format!("{name}.weight_key"), state_dim, embed, state_dim, rng),
            bias_seed: store.add_normal(format!("{name}.bias_seed"), 1, embed, seed_std, rng),
            bias_key: store.add_uniform(format!("{name}.bias_key"), state_dim, embed, state_dim, rng),
            state_dim,
            embed,
            heads,
        })
    }

    fn check_states(&self, g: &Graph, states: Var, samples: usize) -> Result<usize> {
        let (rows, d) = g.value(states).dims();
        if d != self.state_dim || samples == 0 || rows % samples != 0 || rows == 0 {
            return Err(shape_err(
                "st_hypernet",
                format!("states [{rows}, {d}] for {samples} samples of width {}", self.state_dim),
            ));
        }
        Ok(rows / samples)
    }

    /// `[S*m, m]` for a state query, `[S, m]` for a seed query; all entries
    /// nonnegative.
    pub fn weights(&self, g: &mut Graph, store: &ParamStore, states: Var, samples: usize) -> Result<Var> {
        let m = self.check_states(g, states, samples)?;
        let wk = g.bind(store, self.weight_key);
        let keys = g.matmul(states, wk)?;
        let scale = 1.0 / (self.heads as f64 * ((self.embed / self.heads) as f64).sqrt());
        let (queries, nq) = match self.weight_query {
            WeightQuery::State(wq) => {
                let wq = g.bind(store, wq);
                (g.matmul(states, wq)?, m)
            }
            WeightQuery::Seed(seed) => {
                let seed = g.bind(store, seed);
                (g.tile_rows(seed, samples), 1)
            }
        };
        let per_head = g.attn_scores(queries, keys, nq, m, self.heads, scale)?;
        let per_head = g.abs(per_head);
        g.sum_row_groups(per_head, self.heads)
    }

    /// `[S, m]`, sign-unconstrained.
    pub fn bias(&self, g: &mut Graph, store: &ParamStore, states: Var, samples: usize) -> Result<Var> {
        let m = self.check_states(g, states, samples)?;
        let wk = g.bind(store, self.bias_key);
        let keys = g.matmul(states, wk)?;
        let seed = g.bind(store, self.bias_seed);
        let seeds = g.tile_rows(seed, samples);
        let scale = 1.0 / (self.heads as f64 * (self.embed as f64).sqrt());
        // Summing per-head dot products is one dot product over all columns.
        g.attn_scores(seeds, keys, 1, m, 1, scale)
    }

    /// Unbatched evaluation for one state.
    pub fn evaluate(&self, store: &ParamStore, state: &GlobalState, mode: HyperMode) -> Result<Array> {
        let mut g = Graph::inference();
        let s = g.input(state.rows.clone());
        let out = match mode {
            HyperMode::Weights => self.weights(&mut g, store, s, 1)?,
            HyperMode::Bias => self.bias(&mut g, store, s, 1)?,
        };
        Ok(g.value(out).clone())
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let q = match self.weight_query {
            WeightQuery::State(id) | WeightQuery::Seed(id) => id,
        };
        vec![q, self.weight_key, self.bias_seed, self.bias_key]
    }
}

/// Two-layer monotonic mixer driven by two ST-HyperNets:
///
/// ```text
/// H       = ReLU(q W1 + b1)          W1 in R+^{m x m}, b1 in R^m
/// q_joint = H . w2 + mean(b2)        w2 in R+^m
/// ```
#[derive(Clone, Debug)]
pub struct SpectraMixer {
    pub layer1: StHyperNet,
    pub layer2: StHyperNet,
}

impl SpectraMixer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        state_dim: usize,
        embed: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            layer1: StHyperNet::new(store, "mixer.hyper1", state_dim, embed, heads, false, rng)?,
            layer2: StHyperNet::new(store, "mixer.hyper2", state_dim, embed, heads, true, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, q: Var, states: Var) -> Result<Var> {
        let (samples, m) = g.value(q).dims();
        if g.value(states).rows() != samples * m {
            return Err(shape_err(
                "spectra_mix",
                format!("q [{samples}, {m}] vs {} state rows", g.value(states).rows()),
            ));
        }
        let w1 = self.layer1.weights(g, store, states, samples)?;
        let b1 = self.layer1.bias(g, store, states, samples)?;
        let hidden = g.attn_apply(q, w1, 1, m, 1)?;
        let hidden = g.add(hidden, b1)?;
        let hidden = g.relu(hidden);
        let w2 = self.layer2.weights(g, store, states, samples)?;
        let b2 = self.layer2.bias(g, store, states, samples)?;
        let weighted = g.mul(hidden, w2)?;
        let out = g.sum_cols(weighted);
        let b2 = g.sum_cols(b2);
        let b2 = g.scale(b2, 1.0 / m as f64);
        g.add(out, b2)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.layer1.param_ids();
        ids.extend(self.layer2.param_ids());
        ids
    }
}

/// Fixed-size QMIX with two-layer hypernetworks on the flattened state.
#[derive(Clone, Debug)]
pub struct QmixMixer {
    pub agents: usize,
    pub state_dim: usize,
    pub embed: usize,
    pub hyper_w1: (Linear, Linear),
    pub hyper_b1: Linear,
    pub hyper_w2: (Linear, Linear),
    pub value: (Linear, Linear),
}

impl QmixMixer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        agents: usize,
        state_dim: usize,
        embed: usize,
        hyper_embed: usize,
        rng: &mut R,
    ) -> Self {
        let flat = agents * state_dim;
        Self {
            agents,
            state_dim,
            embed,
            hyper_w1: (
                Linear::new(store, "mixer.hyper_w1.0", flat, hyper_embed, true, rng),
                Linear::new(store, "mixer.hyper_w1.1", hyper_embed, agents * embed, true, rng),
            ),
            hyper_b1: Linear::new(store, "mixer.hyper_b1", flat, embed, true, rng),
            hyper_w2: (
                Linear::new(store, "mixer.hyper_w2.0", flat, hyper_embed, true, rng),
                Linear::new(store, "mixer.hyper_w2.1", hyper_embed, embed, true, rng),
            ),
            value: (
                Linear::new(store, "mixer.value.0", flat, embed, true, rng),
                Linear::new(store, "mixer.value.1", embed, 1, true, rng),
            ),
        }
    }

    fn mlp(g: &mut Graph, store: &ParamStore, pair: &(Linear, Linear), x: Var) -> Result<Var> {
        let h = pair.0.forward(g, store, x)?;
        let h = g.relu(h);
        pair.1.forward(g, store, h)
    }

    /// `flat_states` is `[S, m * d_s]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, q: Var, flat_states: Var) -> Result<Var> {
        let (samples, m) = g.value(q).dims();
        if m != self.agents {
            return Err(Error::NonScalableMixer {
                built: self.agents,
                got: m,
            });
        }
        if g.value(flat_states).dims() != (samples, m * self.state_dim) {
            return Err(shape_err("qmix_mlp_mix", "flat state width"));
        }
        let w1 = Self::mlp(g, store, &self.hyper_w1, flat_states)?;
        let w1 = g.abs(w1);
        let w1 = g.reshape(w1, samples * m, self.embed)?;
        let b1 = self.hyper_b1.forward(g, store, flat_states)?;
        let hidden = g.attn_apply(q, w1, 1, m, 1)?;
        let hidden = g.add(hidden, b1)?;
        let hidden = g.elu(hidden);
        let w2 = Self::mlp(g, store, &self.hyper_w2, flat_states)?;
        let w2 = g.abs(w2);
        let weighted = g.mul(hidden, w2)?;
        let out = g.sum_cols(weighted);
        let v = Self::mlp(g, store, &self.value, flat_states)?;
        g.add(out, v)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for l in [
            &self.hyper_w1.0,
            &self.hyper_w1.1,
            &self.hyper_b1,
            &self.hyper_w2.0,
            &self.hyper_w2.1,
            &self.value.0,
            &self.value.1,
        ] {
            ids.push(l.weight);
            ids.extend(l.bias);
        }
        ids
    }
}

#[derive(Clone, Debug)]
pub enum Mixer {
    Vdn,
    Spectra(SpectraMixer),
    Qmix(QmixMixer),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixerConfig {
    pub state_dim: usize,
    pub embed: usize,
    pub heads: usize,
    pub qmix_embed: usize,
    pub qmix_hyper_embed: usize,
}

impl Mixer {
    /// `agents` only matters for the fixed-size QMIX baseline.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        kind: MixerKind,
        cfg: MixerConfig,
        agents: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(match kind {
            MixerKind::Vdn => Self::Vdn,
            MixerKind::Spectra => Self::Spectra(SpectraMixer::new(
                store,
                cfg.state_dim,
                cfg.embed,
                cfg.heads,
                rng,
            )?),
            MixerKind::Qmix => Self::Qmix(QmixMixer::new(
                store,
                agents,
                cfg.state_dim,
                cfg.qmix_embed,
                cfg.qmix_hyper_embed,
                rng,
            )),
        })
    }

    pub fn kind(&self) -> MixerKind {
        match self {
            Self::Vdn => MixerKind::Vdn,
            Self::Spectra(_) => MixerKind::Spectra,
            Self::Qmix(_) => MixerKind::Qmix,
        }
    }

    /// Whether one parameter set serves any team size.
    pub fn is_scalable(&self) -> bool {
        !matches!(self, Self::Qmix(_))
    }

    /// Fail early when a fixed-size mixer meets a different team size.
    pub fn check_agents(&self, m: usize) -> Result<()> {
        match self {
            Self::Qmix(q) if q.agents != m => Err(Error::NonScalableMixer {
                built: q.agents,
                got: m,
            }),
            _ => Ok(()),
        }
    }

    /// `q` is `[S, m]`, `states` is `[S*m, d_s]`; returns `[S, 1]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, q: Var, states: Var) -> Result<Var> {
        match self {
            Self::Vdn => Ok(g.sum_cols(q)),
            Self::Spectra(mix) => mix.forward(g, store, q, states),
            Self::Qmix(mix) => {
                let (samples, m) = g.value(q).dims();
                self.check_agents(m)?;
                if g.value(states).rows() != samples * m {
                    return Err(shape_err("qmix_mlp_mix", "state rows"));
                }
                let flat = g.reshape(states, samples, m * mix.state_dim)?;
                mix.forward(g, store, q, flat)
            }
        }
    }

    /// Unbatched `q_joint` for one state.
    pub fn mix(&self, store: &ParamStore, q: &[f64], state: &GlobalState) -> Result<f64> {
        if q.len() != state.agents() {
            return Err(shape_err(
                "mix",
                format!("{} q values for {} state rows", q.len(), state.agents()),
            ));
        }
        let mut g = Graph::inference();
        let qv = g.input(Array::row(q.to_vec()));
        let s = g.input(state.rows.clone());
        let out = self.forward(&mut g, store, qv, s)?;
        Ok(g.value(out).data()[0])
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            Self::Vdn => Vec::new(),
            Self::Spectra(m) => m.param_ids(),
            Self::Qmix(m) => m.param_ids(),
        }
    }

    pub fn num_params(&self, store: &ParamStore) -> usize {
        self.param_ids().iter().map(|id| store.get(*id).len()).sum()
    }
}
