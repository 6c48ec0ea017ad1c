//! Episode collection with epsilon-greedy agents.

use super::replay::Episode;
use crate::agent::{greedy_action, split_action_values, ActionChoice, ActionMask, ObsBatch};
use crate::array::Array;
use crate::autodiff::Graph;
use crate::env::{random_legal_action, EnvConfig, MicroBattle, StepResult, TraceStep};
use crate::error::{shape_err, Result};
use crate::model::Model;
use crate::params::ParamStore;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// With probability `eps` a uniform legal action, otherwise the greedy one.
pub fn epsilon_greedy<R: Rng + ?Sized>(
    q_row: &[f64],
    entity_ids: &[usize],
    own_actions: usize,
    mask: &ActionMask,
    eps: f64,
    rng: &mut R,
) -> Result<ActionChoice> {
    if eps > 0.0 && rng.random::<f64>() < eps {
        return Ok(random_legal_action(mask, rng));
    }
    greedy_action(&split_action_values(q_row, entity_ids, own_actions))
}

/// Per-step SAQA weights for one agent: `[heads, slots]` plus slot ids.
#[derive(Clone, Debug)]
pub struct AttentionRecord {
    pub t: usize,
    pub agent: usize,
    pub entity_ids: Vec<usize>,
    pub weights: Array,
}

#[derive(Clone, Debug, Default)]
pub struct RolloutOptions {
    pub trace: bool,
    pub attention: bool,
}

#[derive(Clone, Debug)]
pub struct Rollout {
    pub episode: Episode,
    pub trace: Vec<TraceStep>,
    pub attention: Vec<AttentionRecord>,
}

fn batch_of(step: &StepResult) -> Result<ObsBatch> {
    let sets: Vec<_> = step.observations.iter().collect();
    let masks: Vec<_> = step.masks.iter().collect();
    ObsBatch::from_sets(&sets, &masks)
}

/// Play one full episode. The GRU state starts at zero and the parameters
/// are read-only throughout.
pub fn rollout(
    model: &Model,
    store: &ParamStore,
    env_cfg: &EnvConfig,
    episode_seed: u64,
    eps: f64,
    opts: &RolloutOptions,
) -> Result<Rollout> {
    model.mixer.check_agents(env_cfg.agents)?;
    let (mut env, mut step) = MicroBattle::reset(env_cfg, episode_seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(episode_seed ^ 0xA5A5_5A5A_0F0F_F0F0);
    let m = env_cfg.agents;
    let u = model.agent.cfg.own_actions;
    let mut h = Array::zeros(m, model.agent.cfg.rnn_hidden);
    let mut ep = Episode {
        agents: m,
        enemies: env_cfg.enemies,
        obs: Vec::new(),
        states: Vec::new(),
        actions: Vec::new(),
        rewards: Vec::new(),
        terminated: Vec::new(),
        win: false,
    };
    let mut trace = Vec::new();
    let mut attention = Vec::new();
    loop {
        let batch = batch_of(&step)?;
        ep.states.push(step.state.rows.clone());
        if env.is_done() {
            ep.obs.push(batch);
            break;
        }
        let mut g = Graph::inference();
        let hv = g.input(h);
        let out = model.agent.forward_batch(&mut g, store, &batch, hv)?;
        let q = g.value(out.q_masked);
        let slots = batch.slots();
        let mut choices = Vec::with_capacity(m);
        let mut columns = Vec::with_capacity(m);
        for i in 0..m {
            let ids = &batch.entity_ids[i * slots..(i + 1) * slots];
            let c = epsilon_greedy(q.row_slice(i), ids, u, &step.masks[i], eps, &mut rng)?;
            columns.push(
                batch
                    .choice_column(i, c, u)
                    .ok_or_else(|| shape_err("rollout", "chosen action has no column"))?,
            );
            choices.push(c);
        }
        if opts.attention {
            if let Some(w) = out.attention {
                let w = g.value(w);
                let heads = w.rows() / m;
                for i in 0..m {
                    let rows: Vec<f64> = (0..heads)
                        .flat_map(|k| w.row_slice(i * heads + k).to_vec())
                        .collect();
                    attention.push(AttentionRecord {
                        t: env.time(),
                        agent: i,
                        entity_ids: batch.entity_ids[i * slots..(i + 1) * slots].to_vec(),
                        weights: Array::matrix(heads, slots, rows)?,
                    });
                }
            }
        }
        h = g.value(out.hidden).clone();
        let t = env.time();
        step = env.step(&choices)?;
        ep.obs.push(batch);
        ep.actions.push(columns);
        ep.rewards.push(step.reward);
        ep.terminated.push(step.terminated);
        ep.win |= step.win;
        if opts.trace {
            trace.push(TraceStep {
                t,
                actions: choices,
                reward: step.reward,
                terminated: step.terminated,
                truncated: step.truncated,
                win: step.win,
                entities: env.snapshot(),
            });
        }
    }
    Ok(Rollout {
        episode: ep,
        trace,
        attention,
    })
}

/// Collect episodes for `seeds`, spreading them over `workers` threads.
/// Each episode depends only on its seed, so the result is identical for
/// any worker count.
pub fn collect(
    model: &Model,
    store: &ParamStore,
    env_cfg: &EnvConfig,
    seeds: &[u64],
    eps: f64,
    workers: usize,
) -> Result<Vec<Episode>> {
    let opts = RolloutOptions::default();
    let run = |s: &u64| rollout(model, store, env_cfg, *s, eps, &opts).map(|r| r.episode);
    if workers <= 1 || seeds.len() <= 1 {
        return seeds.iter().map(run).collect();
    }
    let chunk = seeds.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .chunks(chunk)
            .map(|c| scope.spawn(move || c.iter().map(run).collect::<Result<Vec<_>>>()))
            .collect();
        let mut out = Vec::with_capacity(seeds.len());
        for h in handles {
            out.extend(h.join().expect("rollout worker panicked")?);
        }
        Ok(out)
    })
}

/// Greedy win rate over `episodes` evaluation episodes.
pub fn evaluate(
    model: &Model,
    store: &ParamStore,
    env_cfg: &EnvConfig,
    episodes: usize,
    seed: u64,
) -> Result<EvalReport> {
    let seeds: Vec<u64> = (0..episodes as u64)
        .map(|k| seed.wrapping_mul(1_000_003).wrapping_add(k) | (1 << 63))
        .collect();
    let eps = collect(model, store, env_cfg, &seeds, 0.0, 1)?;
    let wins = eps.iter().filter(|e| e.win).count();
    Ok(EvalReport {
        episodes,
        wins,
        win_rate: wins as f64 / episodes.max(1) as f64,
        mean_return: eps.iter().map(Episode::episode_return).sum::<f64>() / episodes.max(1) as f64,
        mean_length: eps.iter().map(Episode::len).sum::<usize>() as f64 / episodes.max(1) as f64,
    })
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct EvalReport {
    pub episodes: usize,
    pub wins: usize,
    pub win_rate: f64,
    pub mean_return: f64,
    pub mean_length: f64,
}
