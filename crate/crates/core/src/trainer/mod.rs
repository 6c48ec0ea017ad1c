//! Value-decomposition Q-learning with curriculum stages and transfer.
//!
//! The loop collects `episodes_per_update` epsilon-greedy episodes, stores
//! them in a FIFO replay buffer, and once the buffer holds `batch_size`
//! episodes performs one Adam step on the double-Q TD loss. The target
//! network is a copy of the online parameters refreshed every
//! `target_update_interval` episodes.

pub mod learner;
pub mod replay;
pub mod rollout;

pub use learner::{td_loss, td_targets, Adam};
pub use replay::{Episode, EpisodeBatch, ReplayBuffer};
pub use rollout::{collect, epsilon_greedy, evaluate, rollout, EvalReport, Rollout, RolloutOptions};

use crate::autodiff::Graph;
use crate::checkpoint;
use crate::config::KvConfig;
use crate::env::{kv_parse, EnvConfig};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub env: EnvConfig,
    pub fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub gamma: f64,
    pub lr: f64,
    pub grad_clip: f64,
    pub eps_start: f64,
    pub eps_end: f64,
    /// Fraction of `total_steps` over which epsilon anneals linearly.
    pub eps_anneal_fraction: f64,
    /// Episodes per gradient step.
    pub batch_size: usize,
    /// Replay capacity in episodes.
    pub buffer_capacity: usize,
    /// Target sync period in episodes.
    pub target_update_interval: usize,
    pub total_steps: usize,
    pub episodes_per_update: usize,
    pub rollout_workers: usize,
    /// Checkpoint period in env steps; 0 keeps only the initial and final.
    pub checkpoint_every: usize,
    /// Stop once the final stage's rolling win rate reaches this value.
    pub stop_win_rate: Option<f64>,
    pub win_window: usize,
    pub seed: u64,
    /// Single-threaded rollouts and a zeroed `wall_clock_s` column, so the
    /// metrics file is a pure function of the config.
    pub deterministic: bool,
    pub model: ModelConfig,
    pub stages: Vec<Stage>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lr: 5e-4,
            grad_clip: 10.0,
            eps_start: 1.0,
            eps_end: 0.05,
            eps_anneal_fraction: 0.25,
            batch_size: 128,
            buffer_capacity: 1000,
            target_update_interval: 200,
            total_steps: 200_000,
            episodes_per_update: 1,
            rollout_workers: 1,
            checkpoint_every: 0,
            stop_win_rate: None,
            win_window: 32,
            seed: 0,
            deterministic: true,
            model: ModelConfig::default(),
            stages: vec![Stage {
                env: EnvConfig::default(),
                fraction: 1.0,
            }],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("at least one stage is required".into()));
        }
        let total: f64 = self.stages.iter().map(|s| s.fraction).sum();
        if (total - 1.0).abs() > 1e-9 || self.stages.iter().any(|s| s.fraction < 0.0) {
            return Err(Error::Config(format!("stage fractions sum to {total}, not 1")));
        }
        if self.batch_size == 0 || self.batch_size > self.buffer_capacity {
            return Err(Error::Config("need 0 < batch_size <= buffer_capacity".into()));
        }
        if self.episodes_per_update == 0 || self.win_window == 0 {
            return Err(Error::Config("episodes_per_update and win_window must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(self.lr > 0.0) {
            return Err(Error::Config("gamma must lie in [0, 1] and lr be positive".into()));
        }
        for s in &self.stages {
            s.env.validate()?;
        }
        if self.model.mixer == crate::mixer::MixerKind::Qmix {
            let m = self.stages[0].env.agents;
            if let Some(s) = self.stages.iter().find(|s| s.env.agents != m) {
                return Err(Error::NonScalableMixer {
                    built: m,
                    got: s.env.agents,
                });
            }
        }
        Ok(())
    }

    /// Sections: `[train]`, `[model]`, `[env]` and optional `[stage.K]`
    /// blocks holding `fraction` plus env keys that override `[env]`.
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let mut c = Self::default();
        for (key, value) in kv.section("train") {
            match key {
                "gamma" => c.gamma = kv_parse(key, value)?,
                "lr" => c.lr = kv_parse(key, value)?,
                "grad_clip" => c.grad_clip = kv_parse(key, value)?,
                "eps_start" => c.eps_start = kv_parse(key, value)?,
                "eps_end" => c.eps_end = kv_parse(key, value)?,
                "eps_anneal_fraction" => c.eps_anneal_fraction = kv_parse(key, value)?,
                "batch_size" => c.batch_size = kv_parse(key, value)?,
                "buffer_capacity" => c.buffer_capacity = kv_parse(key, value)?,
                "target_update_interval" => c.target_update_interval = kv_parse(key, value)?,
                "total_steps" => c.total_steps = kv_parse(key, value)?,
                "episodes_per_update" => c.episodes_per_update = kv_parse(key, value)?,
                "rollout_workers" => c.rollout_workers = kv_parse(key, value)?,
                "checkpoint_every" => c.checkpoint_every = kv_parse(key, value)?,
                "stop_win_rate" => {
                    c.stop_win_rate = match value {
                        "" | "none" => None,
                        v => Some(kv_parse(key, v)?),
                    }
                }
                "win_window" => c.win_window = kv_parse(key, value)?,
                "seed" => c.seed = kv_parse(key, value)?,
                "deterministic" => c.deterministic = kv_parse(key, value)?,
                other => return Err(Error::Config(format!("unknown train key {other:?}"))),
            }
        }
        c.model = ModelConfig::from_kv(kv, "model")?;
        let base = EnvConfig::from_kv(kv, "env")?;
        let mut stage_ids: Vec<usize> = Vec::new();
        for (key, _) in kv.iter() {
            if let Some(rest) = key.strip_prefix("stage.") {
                let id = rest.split('.').next().unwrap_or("");
                let id: usize = kv_parse("stage index", id)?;
                if !stage_ids.contains(&id) {
                    stage_ids.push(id);
                }
            }
        }
        stage_ids.sort_unstable();
        if stage_ids.is_empty() {
            c.stages = vec![Stage {
                env: base,
                fraction: 1.0,
            }];
        } else {
            c.stages.clear();
            for id in stage_ids {
                let section = format!("stage.{id}");
                let mut merged = KvConfig::default();
                for (k, v) in kv.section("env") {
                    merged.set(format!("env.{k}"), v);
                }
                let mut fraction = None;
                for (k, v) in kv.section(&section) {
                    if k == "fraction" {
                        fraction = Some(kv_parse::<f64>(k, v)?);
                    } else {
                        merged.set(format!("env.{k}"), v);
                    }
                }
                c.stages.push(Stage {
                    env: EnvConfig::from_kv(&merged, "env")?,
                    fraction: fraction
                        .ok_or_else(|| Error::Config(format!("{section} lacks a fraction")))?,
                });
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn epsilon(&self, env_step: usize) -> f64 {
        let horizon = self.eps_anneal_fraction * self.total_steps as f64;
        if horizon <= 0.0 {
            return self.eps_end;
        }
        let frac = (env_step as f64 / horizon).min(1.0);
        self.eps_start + (self.eps_end - self.eps_start) * frac
    }

    /// Env-step budget of each stage; the last stage absorbs rounding.
    pub fn stage_budgets(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .stages
            .iter()
            .map(|s| (s.fraction * self.total_steps as f64).round() as usize)
            .collect();
        let head: usize = out[..out.len() - 1].iter().sum();
        *out.last_mut().expect("non-empty") = self.total_steps.saturating_sub(head);
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub env_step: usize,
    pub episode_return: f64,
    pub win_rate: f64,
    pub loss: Option<f64>,
    pub epsilon: f64,
    pub wall_clock_s: f64,
    #[serde(skip)]
    pub stage: usize,
    /// Episodes finished in the current stage, this one included.
    #[serde(skip)]
    pub stage_episodes: usize,
}

pub const METRICS_HEADER: [&str; 6] = [
    "env_step",
    "episode_return",
    "win_rate",
    "loss",
    "epsilon",
    "wall_clock_s",
];

#[derive(Clone, Debug, Serialize)]
pub struct CheckpointRecord {
    pub env_step: usize,
    pub path: Option<PathBuf>,
    pub hash: String,
}

/// A hard copy of the online parameters into the target network.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TargetSync {
    /// Gradient steps taken before the copy.
    pub update: usize,
    pub env_step: usize,
    pub hash: String,
}

#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub model: Model,
    pub store: ParamStore,
    pub target: ParamStore,
    pub target_syncs: Vec<TargetSync>,
    pub metrics: Vec<MetricsRow>,
    pub checkpoints: Vec<CheckpointRecord>,
    /// Env step at which each stage started.
    pub stage_starts: Vec<usize>,
    /// Parameter manifest at the start of each stage.
    pub stage_manifests: Vec<Vec<(String, Vec<usize>)>>,
    pub updates: usize,
    pub env_steps: usize,
    pub stopped_early: bool,
    pub metrics_path: Option<PathBuf>,
}

impl RunArtifacts {
    /// Env steps (counted from the run start) at which the final stage's
    /// rolling win rate first reaches `threshold` over a full window.
    pub fn steps_to_threshold(&self, threshold: f64, window: usize) -> Option<usize> {
        let last = self.stage_starts.len().saturating_sub(1);
        self.metrics
            .iter()
            .find(|r| r.stage == last && r.stage_episodes >= window && r.win_rate >= threshold)
            .map(|r| r.env_step)
    }

    pub fn final_win_rate(&self) -> Option<f64> {
        self.metrics.last().map(|r| r.win_rate)
    }
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(METRICS_HEADER).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.env_step.to_string(),
            r.episode_return.to_string(),
            r.win_rate.to_string(),
            r.loss.map(|l| l.to_string()).unwrap_or_default(),
            r.epsilon.to_string(),
            r.wall_clock_s.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let f = |i: usize| -> Result<f64> { kv_parse(METRICS_HEADER[i], &rec[i]) };
        out.push(MetricsRow {
            env_step: kv_parse("env_step", &rec[0])?,
            episode_return: f(1)?,
            win_rate: f(2)?,
            loss: if rec[3].is_empty() { None } else { Some(f(3)?) },
            epsilon: f(4)?,
            wall_clock_s: f(5)?,
            stage: 0,
            stage_episodes: 0,
        });
    }
    Ok(out)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Config(format!("csv: {e}"))
}

fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Episode seed of the `k`-th training episode of a run.
pub fn episode_seed(run_seed: u64, k: u64) -> u64 {
    mix_seed(run_seed, k)
}

/// Outputs of a run go under `out_dir` when given.
pub struct TrainOptions<'a> {
    pub out_dir: Option<&'a Path>,
    /// Start from these parameters instead of a fresh initialisation.
    pub init: Option<ParamStore>,
}

fn save_checkpoint(
    out_dir: Option<&Path>,
    store: &ParamStore,
    env_step: usize,
    cfg: &TrainConfig,
) -> Result<CheckpointRecord> {
    let hash = store.content_hash();
    let path = match out_dir {
        Some(dir) => {
            let ckpt_dir = dir.join("checkpoints");
            std::fs::create_dir_all(&ckpt_dir)?;
            let p = ckpt_dir.join(format!("step_{env_step:09}.ckpt"));
            checkpoint::save(
                &p,
                store,
                serde_json::json!({
                    "env_step": env_step,
                    "model": cfg.model,
                    "hash": hash,
                }),
            )?;
            Some(p)
        }
        None => None,
    };
    Ok(CheckpointRecord {
        env_step,
        path,
        hash,
    })
}

pub fn train(cfg: &TrainConfig, opts: TrainOptions<'_>) -> Result<RunArtifacts> {
    cfg.validate()?;
    let started = Instant::now();
    let m0 = cfg.stages[0].env.agents;
    let (model, fresh) = Model::new(cfg.model, m0, mix_seed(cfg.seed, 0x5EED))?;
    let mut store = match opts.init {
        Some(init) => {
            let mut s = fresh;
            crate::params::check_manifest(&s.manifest(), &init.manifest())?;
            s.copy_from(&init)?;
            s
        }
        None => fresh,
    };
    let mut target = store.clone();
    let mut adam = Adam::new(cfg.lr, Some(cfg.grad_clip));
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0xB0FF));
    let mut replay = ReplayBuffer::new(cfg.buffer_capacity);
    let workers = if cfg.deterministic { 1 } else { cfg.rollout_workers.max(1) };

    if let Some(dir) = opts.out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut checkpoints = vec![save_checkpoint(opts.out_dir, &store, 0, cfg)?];
    let mut metrics = Vec::new();
    let mut timing = Vec::new();
    let mut env_steps = 0usize;
    let mut episodes = 0u64;
    let mut updates = 0usize;
    let mut since_sync = 0usize;
    let mut last_loss = None;
    let mut next_ckpt = cfg.checkpoint_every;
    let mut stage_starts = Vec::new();
    let mut stage_manifests = Vec::new();
    let mut stopped_early = false;
    let mut target_syncs = Vec::new();

    let budgets = cfg.stage_budgets();
    'stages: for (si, (stage, budget)) in cfg.stages.iter().zip(budgets).enumerate() {
        model.mixer.check_agents(stage.env.agents)?;
        if si > 0 {
            replay.clear();
        }
        stage_starts.push(env_steps);
        stage_manifests.push(store.manifest());
        let stage_end = env_steps + budget;
        let mut window: VecDeque<bool> = VecDeque::with_capacity(cfg.win_window);
        let mut stage_episodes = 0usize;
        let is_last = si + 1 == cfg.stages.len();
        while env_steps < stage_end {
            let eps = cfg.epsilon(env_steps);
            let seeds: Vec<u64> = (0..cfg.episodes_per_update as u64)
                .map(|k| episode_seed(cfg.seed, episodes + k))
                .collect();
            let batch = collect(&model, &store, &stage.env, &seeds, eps, workers)?;
            for ep in batch {
                episodes += 1;
                since_sync += 1;
                stage_episodes += 1;
                env_steps += ep.len();
                if window.len() == cfg.win_window {
                    window.pop_front();
                }
                window.push_back(ep.win);
                let win_rate = window.iter().filter(|w| **w).count() as f64 / window.len() as f64;
                let wall = started.elapsed().as_secs_f64();
                timing.push((env_steps, wall));
                metrics.push(MetricsRow {
                    env_step: env_steps,
                    episode_return: ep.episode_return(),
                    win_rate,
                    loss: last_loss,
                    epsilon: eps,
                    wall_clock_s: if cfg.deterministic { 0.0 } else { wall },
                    stage: si,
                    stage_episodes,
                });
                replay.push(ep);
            }

            if replay.len() >= cfg.batch_size {
                let batch = replay.sample(cfg.batch_size, &mut rng)?;
                let mut g = Graph::new();
                let loss = td_loss(&mut g, &model, &store, &target, &batch, cfg.gamma)?;
                let value = g.value(loss).data()[0];
                if !value.is_finite() {
                    let diagnostic = format!(
                        "loss {value} at update {updates}, env step {env_steps}, \
                         batch of {} episodes x {} steps, parameter hash {}",
                        batch.episodes,
                        batch.max_len,
                        store.content_hash()
                    );
                    if let Some(dir) = opts.out_dir {
                        std::fs::write(dir.join("nan_dump.txt"), &diagnostic)?;
                        checkpoint::save(&dir.join("nan_dump.ckpt"), &store, serde_json::Value::Null)?;
                    }
                    return Err(Error::NanLoss {
                        update: updates,
                        diagnostic,
                    });
                }
                g.backward(loss)?;
                adam.apply(&mut store, &g.param_grads());
                updates += 1;
                last_loss = Some(value);
            }
            if since_sync >= cfg.target_update_interval {
                target.copy_from(&store)?;
                since_sync = 0;
                target_syncs.push(TargetSync {
                    update: updates,
                    env_step: env_steps,
                    hash: target.content_hash(),
                });
            }
            if cfg.checkpoint_every > 0 && env_steps >= next_ckpt && env_steps < cfg.total_steps {
                checkpoints.push(save_checkpoint(opts.out_dir, &store, env_steps, cfg)?);
                while next_ckpt <= env_steps {
                    next_ckpt += cfg.checkpoint_every;
                }
            }
            if let Some(th) = cfg.stop_win_rate {
                let full = window.len() == cfg.win_window;
                let rate = window.iter().filter(|w| **w).count() as f64 / window.len().max(1) as f64;
                if is_last && full && rate >= th {
                    stopped_early = true;
                    break 'stages;
                }
            }
        }
    }
    if env_steps > 0 {
        checkpoints.push(save_checkpoint(opts.out_dir, &store, env_steps, cfg)?);
    }

    let mut metrics_path = None;
    if let Some(dir) = opts.out_dir {
        let p = dir.join("metrics.csv");
        write_metrics(&p, &metrics)?;
        metrics_path = Some(p);
        // Real timings would make the run directory depend on the machine.
        if !cfg.deterministic {
            let mut w = csv::Writer::from_path(dir.join("timing.csv")).map_err(csv_err)?;
            w.write_record(["env_step", "wall_clock_s"]).map_err(csv_err)?;
            for (s, t) in &timing {
                w.write_record([s.to_string(), format!("{t:.6}")]).map_err(csv_err)?;
            }
            w.flush()?;
        }
    }
    Ok(RunArtifacts {
        model,
        store,
        target,
        target_syncs,
        metrics,
        checkpoints,
        stage_starts,
        stage_manifests,
        updates,
        env_steps,
        stopped_early,
        metrics_path,
    })
}

/// Load a checkpoint into networks built for `env`. Every parameter is
/// restored bit-exactly; names must match the architecture.
pub fn transfer_load(
    path: &Path,
    model_cfg: ModelConfig,
    env: &EnvConfig,
) -> Result<(Model, ParamStore)> {
    let (model, mut store) = Model::new(model_cfg, env.agents, 0)?;
    checkpoint::load_into(path, &mut store)?;
    Ok((model, store))
}
