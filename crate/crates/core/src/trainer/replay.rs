//! Episode storage, FIFO replay and padded training batches.

use crate::agent::ObsBatch;
use crate::array::Array;
use crate::error::{shape_err, Error, Result};
use rand::Rng;
use std::collections::VecDeque;

/// One collected episode of `len` transitions.
///
/// `obs` and `states` hold `len + 1` entries (the final observation is kept
/// for bootstrapping); `actions`, `rewards` and `terminated` hold `len`.
#[derive(Clone, Debug)]
pub struct Episode {
    pub agents: usize,
    pub enemies: usize,
    /// One batch of `agents` groups per step.
    pub obs: Vec<ObsBatch>,
    /// `[agents, d_s]` per step.
    pub states: Vec<Array>,
    /// Chosen q column per agent.
    pub actions: Vec<Vec<usize>>,
    pub rewards: Vec<f64>,
    pub terminated: Vec<bool>,
    pub win: bool,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn episode_return(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    episodes: VecDeque<Episode>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            episodes: VecDeque::with_capacity(capacity.min(4096)),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    /// Append, evicting the oldest episode when full.
    pub fn push(&mut self, ep: Episode) {
        if self.episodes.len() == self.capacity {
            self.episodes.pop_front();
        }
        self.episodes.push_back(ep);
    }

    pub fn clear(&mut self) {
        self.episodes.clear();
    }

    pub fn get(&self, i: usize) -> &Episode {
        &self.episodes[i]
    }

    /// Indices of `n` distinct episodes drawn uniformly.
    pub fn sample_indices<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<usize>> {
        if n == 0 || n > self.episodes.len() {
            return Err(Error::Config(format!(
                "cannot sample {n} episodes from {}",
                self.episodes.len()
            )));
        }
        Ok(rand::seq::index::sample(rng, self.episodes.len(), n).into_vec())
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<EpisodeBatch> {
        let idx = self.sample_indices(n, rng)?;
        let eps: Vec<&Episode> = idx.iter().map(|&i| &self.episodes[i]).collect();
        EpisodeBatch::from_episodes(&eps)
    }
}

/// `B` episodes padded to a common length `T`.
///
/// Step `t` stacks the observations of every episode, episode-major:
/// group `b * m + i` is agent `i` of episode `b`. Episodes shorter than `T`
/// repeat their final observation and carry `valid = 0`.
#[derive(Clone, Debug)]
pub struct EpisodeBatch {
    pub episodes: usize,
    pub agents: usize,
    pub max_len: usize,
    /// `max_len + 1` entries of `episodes * agents` groups.
    pub obs: Vec<ObsBatch>,
    /// `max_len + 1` entries of `[episodes * agents, d_s]`.
    pub states: Vec<Array>,
    /// `max_len` entries of `episodes * agents` q columns.
    pub actions: Vec<Vec<usize>>,
    /// `[max_len * episodes]`, time-major.
    pub rewards: Vec<f64>,
    pub terminated: Vec<bool>,
    pub valid: Vec<bool>,
}

impl EpisodeBatch {
    pub fn from_episodes(eps: &[&Episode]) -> Result<Self> {
        let first = eps.first().ok_or(Error::Empty("episode batch"))?;
        let m = first.agents;
        if eps.iter().any(|e| e.agents != m || e.enemies != first.enemies) {
            return Err(shape_err("EpisodeBatch", "episodes differ in team sizes"));
        }
        if eps.iter().any(|e| e.is_empty()) {
            return Err(Error::Empty("episode with no transitions"));
        }
        let t_max = eps.iter().map(|e| e.len()).max().unwrap_or(0);
        let b = eps.len();
        let mut obs = Vec::with_capacity(t_max + 1);
        let mut states = Vec::with_capacity(t_max + 1);
        for t in 0..=t_max {
            let parts: Vec<&ObsBatch> = eps.iter().map(|e| &e.obs[t.min(e.len())]).collect();
            obs.push(ObsBatch::stack(&parts)?);
            let mut data = Vec::new();
            for e in eps {
                data.extend_from_slice(e.states[t.min(e.len())].data());
            }
            let d_s = first.states[0].cols();
            states.push(Array::matrix(b * m, d_s, data)?);
        }
        let mut actions = Vec::with_capacity(t_max);
        let mut rewards = Vec::with_capacity(t_max * b);
        let mut terminated = Vec::with_capacity(t_max * b);
        let mut valid = Vec::with_capacity(t_max * b);
        for t in 0..t_max {
            let mut a = Vec::with_capacity(b * m);
            for e in eps {
                let live = t < e.len();
                if live {
                    a.extend_from_slice(&e.actions[t]);
                } else {
                    a.extend(std::iter::repeat_n(0, m));
                }
                rewards.push(if live { e.rewards[t] } else { 0.0 });
                terminated.push(live && e.terminated[t]);
                valid.push(live);
            }
            actions.push(a);
        }
        Ok(Self {
            episodes: b,
            agents: m,
            max_len: t_max,
            obs,
            states,
            actions,
            rewards,
            terminated,
            valid,
        })
    }

    pub fn valid_steps(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}
