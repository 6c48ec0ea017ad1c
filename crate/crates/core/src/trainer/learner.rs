//! TD loss through any mixer, and the Adam optimiser.

use super::replay::EpisodeBatch;
use crate::array::Array;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::{ParamId, ParamStore};

/// Index of the first maximal entry; masked entries are `-inf`.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = j;
        }
    }
    best
}

/// Run the agent over a padded batch. Returns the `[B, m]` values of the
/// `taken` columns for every `t < T`, and for every `t in 1..=T` the greedy
/// column of each agent under the masked values.
fn unroll(
    g: &mut Graph,
    model: &Model,
    store: &ParamStore,
    batch: &EpisodeBatch,
    taken: Option<&[Vec<usize>]>,
) -> Result<(Vec<Var>, Vec<Vec<usize>>)> {
    let bm = batch.episodes * batch.agents;
    let mut h = g.input(Array::zeros(bm, model.agent.cfg.rnn_hidden));
    let mut picked = Vec::with_capacity(batch.max_len);
    let mut greedy = Vec::with_capacity(batch.max_len);
    for t in 0..=batch.max_len {
        let step = model.agent.forward_batch(g, store, &batch.obs[t], h)?;
        h = step.hidden;
        if let Some(cols) = taken {
            if t < batch.max_len {
                let q = g.pick(step.q, &cols[t])?;
                picked.push(g.reshape(q, batch.episodes, batch.agents)?);
            }
        }
        if t >= 1 {
            let qm = g.value(step.q_masked);
            greedy.push((0..bm).map(|r| argmax(qm.row_slice(r))).collect());
        }
    }
    Ok((picked, greedy))
}

fn stack_states(batch: &EpisodeBatch, range: std::ops::Range<usize>) -> Result<Array> {
    let d_s = batch.states[0].cols();
    let mut data = Vec::new();
    for t in range.clone() {
        data.extend_from_slice(batch.states[t].data());
    }
    Array::matrix(range.len() * batch.episodes * batch.agents, d_s, data)
}

/// Double-Q TD targets `y = r + gamma (1 - terminated) Q_tot'(s', u*)`
/// where `u*` is greedy under the online network and `Q_tot'` comes from
/// the target network.
pub fn td_targets(
    model: &Model,
    online: &ParamStore,
    target: &ParamStore,
    batch: &EpisodeBatch,
    gamma: f64,
) -> Result<Vec<f64>> {
    let mut go = Graph::inference();
    let (_, greedy) = unroll(&mut go, model, online, batch, None)?;
    drop(go);
    bootstrap(model, target, batch, gamma, &greedy)
}

fn bootstrap(
    model: &Model,
    target: &ParamStore,
    batch: &EpisodeBatch,
    gamma: f64,
    greedy: &[Vec<usize>],
) -> Result<Vec<f64>> {
    let (b, m, t_max) = (batch.episodes, batch.agents, batch.max_len);
    let mut gt = Graph::inference();
    let bm = b * m;
    let mut h = gt.input(Array::zeros(bm, model.agent.cfg.rnn_hidden));
    let mut parts = Vec::with_capacity(t_max);
    for t in 0..=t_max {
        let step = model.agent.forward_batch(&mut gt, target, &batch.obs[t], h)?;
        h = step.hidden;
        if t >= 1 {
            let q = gt.pick(step.q, &greedy[t - 1])?;
            parts.push((gt.reshape(q, b, m)?, b));
        }
    }
    let q_next = gt.interleave(&parts, 1)?;
    let s_next = gt.input(stack_states(batch, 1..t_max + 1)?);
    let q_tot = model.mixer.forward(&mut gt, target, q_next, s_next)?;
    let q_tot = gt.value(q_tot).data();
    Ok((0..t_max * b)
        .map(|k| {
            let cont = if batch.terminated[k] { 0.0 } else { 1.0 };
            batch.rewards[k] + gamma * cont * q_tot[k]
        })
        .collect())
}

/// Build the masked mean-squared TD loss on `g`. Padded steps contribute
/// exactly zero.
pub fn td_loss(
    g: &mut Graph,
    model: &Model,
    online: &ParamStore,
    target: &ParamStore,
    batch: &EpisodeBatch,
    gamma: f64,
) -> Result<Var> {
    let count = batch.valid_steps();
    if count == 0 {
        return Err(Error::Empty("batch has no valid steps"));
    }
    model.mixer.check_agents(batch.agents)?;
    let (b, t_max) = (batch.episodes, batch.max_len);
    let (picked, greedy) = unroll(g, model, online, batch, Some(&batch.actions))?;
    let y = bootstrap(model, target, batch, gamma, &greedy)?;
    let parts: Vec<(Var, usize)> = picked.into_iter().map(|v| (v, b)).collect();
    let q = g.interleave(&parts, 1)?;
    let s = g.input(stack_states(batch, 0..t_max)?);
    let q_tot = model.mixer.forward(g, online, q, s)?;
    let y = g.input(Array::matrix(t_max * b, 1, y)?);
    let diff = g.sub(q_tot, y)?;
    let valid = batch
        .valid
        .iter()
        .map(|v| if *v { 1.0 } else { 0.0 })
        .collect();
    let mask = g.input(Array::matrix(t_max * b, 1, valid)?);
    let diff = g.mul(diff, mask)?;
    let sq = g.mul(diff, diff)?;
    let total = g.sum_all(sq);
    Ok(g.scale(total, 1.0 / count as f64))
}

/// Adam with global gradient-norm clipping.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip: Option<f64>,
    step: u64,
    m: Vec<Option<Array>>,
    v: Vec<Option<Array>>,
}

impl Adam {
    pub fn new(lr: f64, clip: Option<f64>) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Apply one update; returns the pre-clip gradient norm.
    pub fn apply(&mut self, store: &mut ParamStore, grads: &[(ParamId, &Array)]) -> f64 {
        let norm = grads
            .iter()
            .map(|(_, g)| g.sq_norm())
            .sum::<f64>()
            .sqrt();
        let scale = match self.clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        for (id, g) in grads {
            let i = id.index();
            let (r, c) = g.dims();
            let m = self.m[i].get_or_insert_with(|| Array::zeros(r, c));
            let v = self.v[i].get_or_insert_with(|| Array::zeros(r, c));
            let p = store.get_mut(*id);
            for (((pv, gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gv = gv * scale;
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                *pv -= self.lr * (*mv / bc1) / ((*vv / bc2).sqrt() + self.eps);
            }
        }
        norm
    }
}
