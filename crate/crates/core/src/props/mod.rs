//! Machine checks of the permutation properties, monotonicity, gradients
//! and complexity of the networks.
//!
//! Sizes are `(m, n)`: a team of `m` agents (each observation holds
//! `m - 1` allies) facing `n` enemies.
//!
//! * `saqa-invariance`: the SAQA context of an agent is unchanged when its
//!   allies and enemies are reordered.
//! * `agent-equivariance`: own-action values are unchanged and targeted
//!   values follow their entity ids; the greedy choice is identical.
//! * `hypernet-equivariance`: `W(PS) = P W(S) P^T`, `b(PS) = P b(S)` and
//!   the second-layer seed weights permute with the agents.
//! * `mixer-invariance`: `q_joint` is unchanged under a joint permutation of
//!   `(q_i, s_i)`.

pub mod complexity;
pub mod gradcheck;
pub mod suite;

use crate::agent::{greedy_action, split_action_values, ActionMask, EntityObs, ObsBatch, ObservationSet};
use crate::array::Array;
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::mixer::{Mixer, MixerConfig, MixerKind};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

pub const PROP_TOLERANCE: f64 = 1e-9;
/// Permutation groups up to this size are enumerated exhaustively.
pub const EXHAUSTIVE_MAX: usize = 5;
pub const SAMPLED_PERMUTATIONS: usize = 50;

#[derive(Clone, Debug, Serialize)]
pub struct PropReport {
    pub proposition: String,
    pub m: usize,
    pub n: usize,
    pub seeds: u64,
    /// Permuted instances compared against their originals.
    pub instances: usize,
    pub max_abs_deviation: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// Smallest seed whose instance exceeded the tolerance.
    pub counterexample_seed: Option<u64>,
}

pub const PROPOSITIONS: [&str; 4] = [
    "saqa-invariance",
    "agent-equivariance",
    "hypernet-equivariance",
    "mixer-invariance",
];

/// Small networks keep the exhaustive sweeps cheap; the properties do not
/// depend on width.
pub fn prop_model_config() -> ModelConfig {
    ModelConfig {
        mixer: MixerKind::Spectra,
        hidden: 16,
        heads: 4,
        rnn_hidden: 16,
        mixer_embed: 16,
        mixer_heads: 4,
        ..ModelConfig::default()
    }
}

/// Every permutation of `0..n` in lexicographic order.
pub fn all_permutations(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut p: Vec<usize> = (0..n).collect();
    loop {
        out.push(p.clone());
        // Next lexicographic permutation.
        let Some(i) = (1..n).rev().find(|&i| p[i - 1] < p[i]) else {
            break;
        };
        let j = (i..n).rev().find(|&j| p[j] > p[i - 1]).expect("pivot");
        p.swap(i - 1, j);
        p[i..].reverse();
    }
    out
}

fn factorial(n: usize) -> usize {
    (1..=n).product()
}

/// Identity first, then either every permutation or `SAMPLED_PERMUTATIONS`
/// random ones.
fn permutation_set<R: Rng + ?Sized>(n: usize, exhaustive: bool, rng: &mut R) -> Vec<Vec<usize>> {
    if exhaustive {
        return all_permutations(n);
    }
    let mut out = vec![(0..n).collect::<Vec<_>>()];
    for _ in 0..SAMPLED_PERMUTATIONS {
        let mut p: Vec<usize> = (0..n).collect();
        p.shuffle(rng);
        out.push(p);
    }
    out
}

/// Pairs `(ally perm, enemy perm)`, identity first.
fn entity_permutations<R: Rng + ?Sized>(
    allies: usize,
    enemies: usize,
    rng: &mut R,
) -> Vec<(Vec<usize>, Vec<usize>)> {
    if allies <= EXHAUSTIVE_MAX && enemies <= EXHAUSTIVE_MAX {
        let pa = all_permutations(allies);
        let pe = all_permutations(enemies);
        let mut out = Vec::with_capacity(pa.len() * pe.len());
        for a in &pa {
            for e in &pe {
                out.push((a.clone(), e.clone()));
            }
        }
        return out;
    }
    let mut out = vec![((0..allies).collect(), (0..enemies).collect())];
    for _ in 0..SAMPLED_PERMUTATIONS {
        let mut a: Vec<usize> = (0..allies).collect();
        let mut e: Vec<usize> = (0..enemies).collect();
        a.shuffle(rng);
        e.shuffle(rng);
        out.push((a, e));
    }
    out
}

fn normal_vec<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Random parameters: a fresh initialisation with layer-norm gains and biases
/// jittered away from their identity values.
pub fn random_model(cfg: ModelConfig, m: usize, seed: u64) -> Result<(Model, ParamStore)> {
    let (model, mut store) = Model::new(cfg, m, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1A7E_C0DE);
    if let Some(att) = &model.agent.attention {
        for v in store.get_mut(att.ln_gain).data_mut() {
            *v = rng.random_range(0.5..1.5);
        }
        for v in store.get_mut(att.ln_bias).data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    Ok((model, store))
}

/// Random observation for agent 0 of an `m`-agent team facing `n` enemies.
/// Each other entity is visible with probability 0.8; visible enemies are
/// attackable with probability 0.7.
pub fn random_observation<R: Rng + ?Sized>(
    m: usize,
    n: usize,
    own_dim: usize,
    other_dim: usize,
    own_actions: usize,
    rng: &mut R,
) -> (ObservationSet, ActionMask) {
    let other = |id: usize, rng: &mut R| {
        let visible = rng.random_bool(0.8);
        EntityObs {
            id,
            features: if visible {
                normal_vec(other_dim, rng)
            } else {
                vec![0.0; other_dim]
            },
            visible,
        }
    };
    let allies: Vec<EntityObs> = (1..m).map(|id| other(id, rng)).collect();
    let enemies: Vec<EntityObs> = (m..m + n).map(|id| other(id, rng)).collect();
    let mut targets: Vec<(usize, bool)> = (0..m).map(|id| (id, false)).collect();
    targets.extend(enemies.iter().map(|e| (e.id, e.visible && rng.random_bool(0.7))));
    let mut own = vec![true; own_actions];
    for o in own.iter_mut().skip(1) {
        *o = rng.random_bool(0.8);
    }
    (
        ObservationSet {
            agent_id: 0,
            own: normal_vec(own_dim, rng),
            allies,
            enemies,
        },
        ActionMask { own, targets },
    )
}

fn permuted(obs: &ObservationSet, pa: &[usize], pe: &[usize]) -> ObservationSet {
    ObservationSet {
        agent_id: obs.agent_id,
        own: obs.own.clone(),
        allies: pa.iter().map(|&i| obs.allies[i].clone()).collect(),
        enemies: pe.iter().map(|&i| obs.enemies[i].clone()).collect(),
    }
}

/// `|a - b|`, zero when both hold the same infinity.
fn dev(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs()
    }
}

/// Deviations of the SAQA and agent properties for one random instance.
fn agent_instance(m: usize, n: usize, seed: u64) -> Result<(f64, f64, usize)> {
    let cfg = prop_model_config();
    let (model, store) = random_model(cfg, m, seed)?;
    let acfg = model.agent.cfg;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0xD00D));
    let (obs, mask) = random_observation(m, n, acfg.own_dim, acfg.other_dim, acfg.own_actions, &mut rng);
    let perms = entity_permutations(m - 1, n, &mut rng);
    let sets: Vec<ObservationSet> = perms.iter().map(|(a, e)| permuted(&obs, a, e)).collect();
    let set_refs: Vec<&ObservationSet> = sets.iter().collect();
    let masks: Vec<&ActionMask> = vec![&mask; sets.len()];
    let batch = ObsBatch::from_sets(&set_refs, &masks)?;
    let groups = batch.groups;
    let h0: Vec<f64> = (0..acfg.rnn_hidden).map(|_| rng.random_range(-1.0..1.0)).collect();

    let mut g = Graph::inference();
    let h = g.input(Array::matrix(groups, acfg.rnn_hidden, h0.repeat(groups))?);
    let emb = model.agent.embed(&mut g, &store, &batch)?;
    let (ctx, _) = model.agent.context(&mut g, &store, &emb)?;
    let ctx = g.value(ctx).clone();
    let step = model.agent.forward_batch(&mut g, &store, &batch, h)?;
    let q = g.value(step.q_masked);

    let mut saqa_dev = 0.0f64;
    let mut agent_dev = 0.0f64;
    let slots = batch.slots();
    let u = acfg.own_actions;
    let base = split_action_values(q.row_slice(0), &batch.entity_ids[..slots], u);
    let base_choice = greedy_action(&base)?;
    for gi in 1..groups {
        for (a, b) in ctx.row_slice(gi).iter().zip(ctx.row_slice(0)) {
            saqa_dev = saqa_dev.max(dev(*a, *b));
        }
        let v = split_action_values(
            q.row_slice(gi),
            &batch.entity_ids[gi * slots..(gi + 1) * slots],
            u,
        );
        for (a, b) in v.own.iter().zip(&base.own) {
            agent_dev = agent_dev.max(dev(*a, *b));
        }
        for ((ia, a), (ib, b)) in v.targets.iter().zip(&base.targets) {
            if ia != ib {
                return Err(Error::Config("targets not keyed by id".into()));
            }
            agent_dev = agent_dev.max(dev(*a, *b));
        }
        if greedy_action(&v)? != base_choice {
            agent_dev = f64::INFINITY;
        }
    }
    Ok((saqa_dev, agent_dev, groups - 1))
}

fn random_states<R: Rng + ?Sized>(m: usize, d_s: usize, rng: &mut R) -> Array {
    Array::matrix(m, d_s, normal_vec(m * d_s, rng)).expect("sized")
}

fn permute_rows(a: &Array, p: &[usize]) -> Array {
    let rows: Vec<Vec<f64>> = p.iter().map(|&i| a.row_slice(i).to_vec()).collect();
    Array::from_rows(&rows).expect("rows")
}

/// Deviations of the hypernet and mixer properties for one instance.
fn mixer_instance(m: usize, seed: u64) -> Result<(f64, f64, usize)> {
    let cfg = prop_model_config();
    let (model, store) = random_model(cfg, m, seed)?;
    let Mixer::Spectra(mix) = &model.mixer else {
        unreachable!("prop config uses the spectra mixer")
    };
    let d_s = cfg.mixer_config().state_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0xBEEF));
    let s = random_states(m, d_s, &mut rng);
    let q = normal_vec(m, &mut rng);
    let perms = permutation_set(m, m <= EXHAUSTIVE_MAX, &mut rng);
    let states: Vec<Array> = perms.iter().map(|p| permute_rows(&s, p)).collect();
    let samples = perms.len();
    let stacked: Vec<f64> = states.iter().flat_map(|a| a.data().to_vec()).collect();
    let q_stacked: Vec<f64> = perms
        .iter()
        .flat_map(|p| p.iter().map(|&i| q[i]).collect::<Vec<_>>())
        .collect();

    let mut g = Graph::inference();
    let sv = g.input(Array::matrix(samples * m, d_s, stacked)?);
    let w1 = mix.layer1.weights(&mut g, &store, sv, samples)?;
    let b1 = mix.layer1.bias(&mut g, &store, sv, samples)?;
    let w2 = mix.layer2.weights(&mut g, &store, sv, samples)?;
    let b2 = mix.layer2.bias(&mut g, &store, sv, samples)?;
    let qv = g.input(Array::matrix(samples, m, q_stacked)?);
    let out = model.mixer.forward(&mut g, &store, qv, sv)?;
    let (w1, b1, w2, b2, out) = (
        g.value(w1),
        g.value(b1),
        g.value(w2),
        g.value(b2),
        g.value(out),
    );

    let mut hyper_dev = 0.0f64;
    let mut mix_dev = 0.0f64;
    for (si, p) in perms.iter().enumerate() {
        for i in 0..m {
            for j in 0..m {
                let got = w1.get(si * m + i, j);
                let want = w1.get(p[i], p[j]);
                hyper_dev = hyper_dev.max(dev(got, want));
            }
            hyper_dev = hyper_dev.max(dev(b1.get(si, i), b1.get(0, p[i])));
            hyper_dev = hyper_dev.max(dev(w2.get(si, i), w2.get(0, p[i])));
            hyper_dev = hyper_dev.max(dev(b2.get(si, i), b2.get(0, p[i])));
        }
        mix_dev = mix_dev.max(dev(out.get(si, 0), out.get(0, 0)));
    }
    Ok((hyper_dev, mix_dev, samples - 1))
}

struct Acc {
    dev: f64,
    instances: usize,
    fail_seed: Option<u64>,
}

impl Acc {
    fn new() -> Self {
        Self {
            dev: 0.0,
            instances: 0,
            fail_seed: None,
        }
    }

    fn add(&mut self, seed: u64, dev: f64, instances: usize) {
        self.dev = self.dev.max(dev);
        self.instances += instances;
        if !(dev < PROP_TOLERANCE) && self.fail_seed.is_none_or(|s| seed < s) {
            self.fail_seed = Some(seed);
        }
    }

    fn merge(&mut self, o: Acc) {
        self.dev = self.dev.max(o.dev);
        self.instances += o.instances;
        if let Some(s) = o.fail_seed {
            if self.fail_seed.is_none_or(|t| s < t) {
                self.fail_seed = Some(s);
            }
        }
    }
}

fn run_seeds(m: usize, n: usize, seeds: &[u64]) -> Result<[Acc; 4]> {
    let mut acc = [Acc::new(), Acc::new(), Acc::new(), Acc::new()];
    for &seed in seeds {
        let (d1, d2, k) = agent_instance(m, n, seed)?;
        acc[0].add(seed, d1, k);
        acc[1].add(seed, d2, k);
        let (d3, d4, k) = mixer_instance(m, seed)?;
        acc[2].add(seed, d3, k);
        acc[3].add(seed, d4, k);
    }
    Ok(acc)
}

/// Check all four properties for every size over seeds `0..seeds`, using
/// `jobs` worker threads.
pub fn check_propositions(seeds: u64, sizes: &[(usize, usize)], jobs: usize) -> Result<Vec<PropReport>> {
    if sizes.is_empty() {
        return Err(Error::Empty("proposition sizes"));
    }
    if sizes.iter().any(|&(m, n)| m == 0 || n == 0) {
        return Err(Error::Config("sizes need m >= 1 and n >= 1".into()));
    }
    let mut reports = Vec::new();
    for &(m, n) in sizes {
        let all: Vec<u64> = (0..seeds).collect();
        let jobs = jobs.max(1).min(all.len().max(1));
        let chunk = all.len().div_ceil(jobs).max(1);
        let parts: Vec<Result<[Acc; 4]>> = if jobs <= 1 {
            vec![run_seeds(m, n, &all)]
        } else {
            std::thread::scope(|scope| {
                let hs: Vec<_> = all
                    .chunks(chunk)
                    .map(|c| scope.spawn(move || run_seeds(m, n, c)))
                    .collect();
                hs.into_iter()
                    .map(|h| h.join().expect("property worker panicked"))
                    .collect()
            })
        };
        let mut acc = [Acc::new(), Acc::new(), Acc::new(), Acc::new()];
        for p in parts {
            for (a, b) in acc.iter_mut().zip(p?) {
                a.merge(b);
            }
        }
        for (name, a) in PROPOSITIONS.iter().zip(acc) {
            reports.push(PropReport {
                proposition: name.to_string(),
                m,
                n,
                seeds,
                instances: a.instances,
                max_abs_deviation: a.dev,
                tolerance: PROP_TOLERANCE,
                passed: a.fail_seed.is_none(),
                counterexample_seed: a.fail_seed,
            });
        }
    }
    Ok(reports)
}

/// Number of permuted instances per seed for a size, identity excluded.
pub fn permutations_per_seed(m: usize, n: usize) -> (usize, usize) {
    let entity = if m - 1 <= EXHAUSTIVE_MAX && n <= EXHAUSTIVE_MAX {
        factorial(m - 1) * factorial(n) - 1
    } else {
        SAMPLED_PERMUTATIONS
    };
    let agents = if m <= EXHAUSTIVE_MAX {
        factorial(m) - 1
    } else {
        SAMPLED_PERMUTATIONS
    };
    (entity, agents)
}

fn qmix_instance(m: usize, seed: u64) -> Result<f64> {
    let cfg = MixerConfig {
        state_dim: crate::env::STATE_FEATURES,
        embed: 32,
        heads: 4,
        qmix_embed: 32,
        qmix_hyper_embed: 64,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mixer = Mixer::new(&mut store, MixerKind::Qmix, cfg, m, &mut rng)?;
    let s = random_states(m, cfg.state_dim, &mut rng);
    let q = normal_vec(m, &mut rng);
    let mut p: Vec<usize> = (0..m).collect();
    while p.iter().enumerate().all(|(i, v)| i == *v) && m > 1 {
        p.shuffle(&mut rng);
    }
    let base = mixer.mix(&store, &q, &crate::mixer::GlobalState { rows: s.clone() })?;
    let pq: Vec<f64> = p.iter().map(|&i| q[i]).collect();
    let ps = permute_rows(&s, &p);
    let other = mixer.mix(&store, &pq, &crate::mixer::GlobalState { rows: ps })?;
    Ok(dev(base, other))
}

/// Joint-permutation invariance check of the fixed-size QMIX mixer. A
/// deviation above the tolerance is a counterexample; finding one is the
/// expected outcome.
pub fn check_qmix_invariance(m: usize, trials: u64) -> Result<PropReport> {
    let mut dev_max = 0.0f64;
    let mut first = None;
    let mut tested = 0;
    for seed in 0..trials {
        let d = qmix_instance(m, seed)?;
        tested += 1;
        dev_max = dev_max.max(d);
        if !(d < PROP_TOLERANCE) {
            first = Some(seed);
            break;
        }
    }
    Ok(PropReport {
        proposition: "qmix-invariance".into(),
        m,
        n: 0,
        seeds: trials,
        instances: tested,
        max_abs_deviation: dev_max,
        tolerance: PROP_TOLERANCE,
        passed: first.is_none(),
        counterexample_seed: first,
    })
}

/// Re-evaluate a single recorded seed.
pub fn reproduce(proposition: &str, m: usize, n: usize, seed: u64) -> Result<f64> {
    Ok(match proposition {
        "saqa-invariance" => agent_instance(m, n, seed)?.0,
        "agent-equivariance" => agent_instance(m, n, seed)?.1,
        "hypernet-equivariance" => mixer_instance(m, seed)?.0,
        "mixer-invariance" => mixer_instance(m, seed)?.1,
        "qmix-invariance" => qmix_instance(m, seed)?,
        other => return Err(Error::Config(format!("unknown proposition {other:?}"))),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct MonotonicityReport {
    pub mixer: String,
    pub instances: usize,
    pub min_gradient: f64,
    pub violations: usize,
}

/// Autodiff sign check of `d q_joint / d q_i` on random instances with
/// random team sizes in `1..=8` and fresh parameters each time.
pub fn monotonicity_probe(kind: MixerKind, instances: usize, seed: u64) -> Result<MonotonicityReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut min_grad = f64::INFINITY;
    let mut violations = 0;
    for _ in 0..instances {
        let m = rng.random_range(1..=8);
        let cfg = MixerConfig {
            state_dim: crate::env::STATE_FEATURES,
            embed: 16,
            heads: 4,
            qmix_embed: 16,
            qmix_hyper_embed: 32,
        };
        let mut store = ParamStore::new();
        let mixer = Mixer::new(&mut store, kind, cfg, m, &mut rng)?;
        let mut g = Graph::new();
        let q = g.leaf(Array::row(normal_vec(m, &mut rng)));
        let s = g.input(random_states(m, cfg.state_dim, &mut rng));
        let out = mixer.forward(&mut g, &store, q, s)?;
        let loss = g.sum_all(out);
        g.backward(loss)?;
        let grad = g.grad(q).cloned().unwrap_or_else(|| Array::zeros(1, m));
        for v in grad.data() {
            min_grad = min_grad.min(*v);
            if *v < 0.0 {
                violations += 1;
            }
        }
    }
    Ok(MonotonicityReport {
        mixer: kind.to_string(),
        instances,
        min_gradient: min_grad,
        violations,
    })
}

/// Central finite-difference version of [`monotonicity_probe`]; a gradient
/// above `-1e-9` counts as nonnegative.
pub fn monotonicity_fd(kind: MixerKind, instances: usize, seed: u64) -> Result<MonotonicityReport> {
    let h = gradcheck::FD_STEP;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut min_grad = f64::INFINITY;
    let mut violations = 0;
    for _ in 0..instances {
        let m = rng.random_range(1..=8);
        let cfg = MixerConfig {
            state_dim: crate::env::STATE_FEATURES,
            embed: 16,
            heads: 4,
            qmix_embed: 16,
            qmix_hyper_embed: 32,
        };
        let mut store = ParamStore::new();
        let mixer = Mixer::new(&mut store, kind, cfg, m, &mut rng)?;
        let state = crate::mixer::GlobalState {
            rows: random_states(m, cfg.state_dim, &mut rng),
        };
        let mut q = normal_vec(m, &mut rng);
        for i in 0..m {
            let q0 = q[i];
            q[i] = q0 + h;
            let up = mixer.mix(&store, &q, &state)?;
            q[i] = q0 - h;
            let down = mixer.mix(&store, &q, &state)?;
            q[i] = q0;
            let d = (up - down) / (2.0 * h);
            min_grad = min_grad.min(d);
            if d < -1e-9 {
                violations += 1;
            }
        }
    }
    Ok(MonotonicityReport {
        mixer: kind.to_string(),
        instances,
        min_gradient: min_grad,
        violations,
    })
}
