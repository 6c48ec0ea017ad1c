//! Finite-difference gradient checks of every differentiable op, layer,
//! agent network, mixer and the end-to-end TD loss.

use super::gradcheck::{check, check_scalar, GradReport};
use crate::agent::{AgentConfig, AgentKind, AgentNet, ObsBatch, ObservationSet};
use crate::array::Array;
use crate::autodiff::{Graph, Var};
use crate::env::{EnvConfig, OTHER_FEATURES, OWN_ACTIONS, OWN_FEATURES, STATE_FEATURES};
use crate::error::Result;
use crate::mixer::{Mixer, MixerConfig, MixerKind};
use crate::model::{Model, ModelConfig};
use crate::nn::{AttentionConfig, AttentionLayer, EntityEmbeddings, GruCell, Linear};
use crate::params::ParamStore;
use crate::trainer::{collect, td_loss, EpisodeBatch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const LAYER_TOLERANCE: f64 = 1e-4;
pub const LOSS_TOLERANCE: f64 = 1e-3;
/// Coordinates probed per tensor.
const PER_TENSOR: usize = 24;

fn normal(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Array {
    let data = (0..r * c).map(|_| StandardNormal.sample(rng)).collect();
    Array::matrix(r, c, data).expect("sized")
}

/// Normal entries pushed at least 0.1 away from zero, for ops with a kink
/// at the origin.
fn off_kink(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Array {
    let mut a = normal(r, c, rng);
    for v in a.data_mut() {
        *v = v.signum() * (v.abs() + 0.1);
    }
    a
}

fn softmax_weights(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Array {
    let mut a = normal(r, c, rng);
    for i in 0..r {
        let row = &mut a.data_mut()[i * c..(i + 1) * c];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        for v in row.iter_mut() {
            *v = (*v - max).exp() / z;
        }
    }
    a
}

struct Runner {
    rng: ChaCha8Rng,
    reports: Vec<GradReport>,
}

impl Runner {
    fn run<F>(&mut self, name: &str, store: &ParamStore, inputs: Vec<Array>, f: F) -> Result<()>
    where
        F: Fn(&mut Graph, &ParamStore, &[Var]) -> Result<Var>,
    {
        let (err, coords) = check(store, &inputs, f, PER_TENSOR, &mut self.rng)?;
        self.reports.push(GradReport {
            name: name.to_string(),
            max_rel_err: err,
            tolerance: LAYER_TOLERANCE,
            coordinates: coords,
        });
        Ok(())
    }
}

fn op_checks(r: &mut Runner) -> Result<()> {
    let empty = ParamStore::new();
    let rng = &mut r.rng;
    let (a, b) = (normal(3, 4, rng), normal(4, 5, rng));
    let (c, d) = (normal(3, 4, rng), normal(3, 4, rng));
    let row = normal(1, 4, rng);
    let kink = off_kink(3, 4, rng);
    let smooth = normal(3, 4, rng);
    let ln_x = normal(3, 6, rng);
    let (ln_g, ln_b) = (normal(1, 6, rng), normal(1, 6, rng));
    let (q, k) = (normal(2 * 2, 8, rng), normal(2 * 3, 8, rng));
    let w = softmax_weights(2 * 2 * 4, 3, rng);
    let v = normal(2 * 3, 8, rng);
    let (p0, p1) = (normal(2, 3, rng), normal(4, 3, rng));
    let pick_idx: Vec<usize> = (0..5).map(|_| rng.random_range(0..4)).collect();
    let sq = normal(5, 4, rng);
    let big = normal(6, 4, rng);

    r.run("op.matmul", &empty, vec![a, b], |g, _, x| g.matmul(x[0], x[1]))?;
    r.run("op.add", &empty, vec![c.clone(), d.clone()], |g, _, x| g.add(x[0], x[1]))?;
    r.run("op.sub", &empty, vec![c.clone(), d.clone()], |g, _, x| g.sub(x[0], x[1]))?;
    r.run("op.mul", &empty, vec![c.clone(), d.clone()], |g, _, x| g.mul(x[0], x[1]))?;
    r.run("op.add_row", &empty, vec![c.clone(), row], |g, _, x| g.add_row(x[0], x[1]))?;
    r.run("op.scale", &empty, vec![c.clone()], |g, _, x| Ok(g.scale(x[0], -1.7)))?;
    r.run("op.relu", &empty, vec![kink.clone()], |g, _, x| Ok(g.relu(x[0])))?;
    r.run("op.abs", &empty, vec![kink.clone()], |g, _, x| Ok(g.abs(x[0])))?;
    r.run("op.elu", &empty, vec![kink], |g, _, x| Ok(g.elu(x[0])))?;
    r.run("op.sigmoid", &empty, vec![smooth.clone()], |g, _, x| Ok(g.sigmoid(x[0])))?;
    r.run("op.tanh", &empty, vec![smooth.clone()], |g, _, x| Ok(g.tanh(x[0])))?;
    r.run("op.softmax_rows", &empty, vec![smooth.clone()], |g, _, x| g.softmax_rows(x[0]))?;
    r.run("op.concat_cols", &empty, vec![c.clone(), d.clone()], |g, _, x| {
        g.concat_cols(&[x[0], x[1]])
    })?;
    r.run("op.slice_cols", &empty, vec![c.clone()], |g, _, x| g.slice_cols(x[0], 1, 2))?;
    r.run("op.interleave", &empty, vec![p0, p1], |g, _, x| {
        g.interleave(&[(x[0], 1), (x[1], 2)], 2)
    })?;
    r.run("op.layer_norm", &empty, vec![ln_x, ln_g, ln_b], |g, _, x| {
        g.layer_norm(x[0], x[1], x[2])
    })?;
    r.run("op.attn_scores", &empty, vec![q, k], |g, _, x| {
        g.attn_scores(x[0], x[1], 2, 3, 4, 0.7)
    })?;
    r.run("op.attn_apply", &empty, vec![w, v], |g, _, x| g.attn_apply(x[0], x[1], 2, 3, 4))?;
    r.run("op.sum_row_groups", &empty, vec![big.clone()], |g, _, x| g.sum_row_groups(x[0], 3))?;
    r.run("op.tile_rows", &empty, vec![c.clone()], |g, _, x| Ok(g.tile_rows(x[0], 3)))?;
    r.run("op.sum_cols", &empty, vec![c.clone()], |g, _, x| Ok(g.sum_cols(x[0])))?;
    r.run("op.sum_all", &empty, vec![c], |g, _, x| Ok(g.sum_all(x[0])))?;
    r.run("op.pick", &empty, vec![sq], move |g, _, x| g.pick(x[0], &pick_idx))?;
    r.run("op.reshape", &empty, vec![big], |g, _, x| g.reshape(x[0], 4, 6))?;
    Ok(())
}

fn layer_checks(r: &mut Runner) -> Result<()> {
    let mut seed_rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, "lin", 5, 3, true, &mut seed_rng);
    let x = normal(4, 5, &mut r.rng);
    r.run("layer.linear", &store, vec![x], |g, s, v| lin.forward(g, s, v[0]))?;

    let mut store = ParamStore::new();
    let gru = GruCell::new(&mut store, "gru", 5, 6, &mut seed_rng);
    let (x, h) = (normal(3, 5, &mut r.rng), normal(3, 6, &mut r.rng));
    r.run("layer.gru", &store, vec![x, h], |g, s, v| gru.step(g, s, v[0], v[1]))?;

    let cfg = AttentionConfig::new(8, 2)?;
    let mut store = ParamStore::new();
    let att = AttentionLayer::new(&mut store, "att", cfg, &mut seed_rng);
    for v in store.get_mut(att.ln_gain).data_mut() {
        *v = seed_rng.random_range(0.5..1.5);
    }
    for v in store.get_mut(att.ln_bias).data_mut() {
        *v = seed_rng.random_range(-0.5..0.5);
    }
    let (groups, slots) = (2, 4);
    let mut visible = vec![true; groups * slots];
    visible[2] = false;
    visible[7] = false;
    let own = normal(groups, 8, &mut r.rng);
    let mut all = normal(groups * slots, 8, &mut r.rng);
    // Slot 0 of each group is the observer itself.
    for gi in 0..groups {
        let src = own.row_slice(gi).to_vec();
        all.data_mut()[gi * slots * 8..(gi * slots + 1) * 8].copy_from_slice(&src);
    }
    r.run("layer.saqa", &store, vec![own.clone(), all.clone()], |g, s, v| {
        let emb = EntityEmbeddings {
            own: v[0],
            all: v[1],
            groups,
            slots,
            visible: visible.clone(),
        };
        Ok(att.saqa(g, s, &emb)?.context)
    })?;
    r.run("layer.self_attention", &store, vec![own, all], |g, s, v| {
        let emb = EntityEmbeddings {
            own: v[0],
            all: v[1],
            groups,
            slots,
            visible: visible.clone(),
        };
        Ok(att.self_attention(g, s, &emb)?.rows)
    })?;
    Ok(())
}

fn small_agent_config() -> AgentConfig {
    AgentConfig {
        own_dim: OWN_FEATURES,
        other_dim: OTHER_FEATURES,
        hidden: 8,
        heads: 2,
        rnn_hidden: 8,
        own_actions: OWN_ACTIONS,
    }
}

fn agent_checks(r: &mut Runner) -> Result<()> {
    let cfg = small_agent_config();
    let mut obs_rng = ChaCha8Rng::seed_from_u64(11);
    let pairs: Vec<(ObservationSet, crate::agent::ActionMask)> = (0..3)
        .map(|_| {
            super::random_observation(3, 3, cfg.own_dim, cfg.other_dim, cfg.own_actions, &mut obs_rng)
        })
        .collect();
    let sets: Vec<&ObservationSet> = pairs.iter().map(|p| &p.0).collect();
    let masks: Vec<_> = pairs.iter().map(|p| &p.1).collect();
    let batch = ObsBatch::from_sets(&sets, &masks)?;
    for kind in [AgentKind::Spectra, AgentKind::SelfAttention, AgentKind::MeanPool] {
        let mut store = ParamStore::new();
        let mut init = ChaCha8Rng::seed_from_u64(13);
        let net = AgentNet::new(&mut store, kind, cfg, &mut init)?;
        let h = normal(batch.groups, cfg.rnn_hidden, &mut r.rng);
        let b = batch.clone();
        r.run(&format!("agent.{kind}"), &store, vec![h], move |g, s, v| {
            Ok(net.forward_batch(g, s, &b, v[0])?.q)
        })?;
    }
    Ok(())
}

fn mixer_checks(r: &mut Runner) -> Result<()> {
    let cfg = MixerConfig {
        state_dim: STATE_FEATURES,
        embed: 8,
        heads: 2,
        qmix_embed: 8,
        qmix_hyper_embed: 12,
    };
    let (samples, m) = (3, 4);
    for kind in [MixerKind::Vdn, MixerKind::Spectra, MixerKind::Qmix] {
        let mut store = ParamStore::new();
        let mut init = ChaCha8Rng::seed_from_u64(17);
        let mixer = Mixer::new(&mut store, kind, cfg, m, &mut init)?;
        let q = normal(samples, m, &mut r.rng);
        let s = normal(samples * m, cfg.state_dim, &mut r.rng);
        if let Mixer::Spectra(mix) = &mixer {
            let hyper = mix.layer1.clone();
            r.run("mixer.st_hypernet", &store, vec![s.clone()], move |g, st, v| {
                let w = hyper.weights(g, st, v[0], samples)?;
                let b = hyper.bias(g, st, v[0], samples)?;
                let w = g.reshape(w, 1, samples * m * m)?;
                let b = g.reshape(b, 1, samples * m)?;
                g.concat_cols(&[w, b])
            })?;
        }
        r.run(&format!("mixer.{kind}"), &store, vec![q, s], move |g, st, v| {
            mixer.forward(g, st, v[0], v[1])
        })?;
    }
    Ok(())
}

/// A few short training episodes for the loss check.
fn loss_batch(model: &Model, store: &ParamStore, env: &EnvConfig) -> Result<EpisodeBatch> {
    let eps = collect(model, store, env, &[1, 2, 3], 1.0, 1)?;
    let refs: Vec<_> = eps.iter().collect();
    EpisodeBatch::from_episodes(&refs)
}

fn loss_checks(reports: &mut Vec<GradReport>, rng: &mut ChaCha8Rng) -> Result<()> {
    let env = EnvConfig {
        max_steps: 6,
        ..EnvConfig::default()
    };
    for mixer in [MixerKind::Vdn, MixerKind::Spectra, MixerKind::Qmix] {
        let cfg = ModelConfig {
            mixer,
            hidden: 8,
            heads: 2,
            rnn_hidden: 8,
            mixer_embed: 8,
            mixer_heads: 2,
            qmix_embed: 8,
            qmix_hyper_embed: 12,
            ..ModelConfig::default()
        };
        let (model, online) = Model::new(cfg, env.agents, 23)?;
        let (_, target) = Model::new(cfg, env.agents, 29)?;
        let batch = loss_batch(&model, &online, &env)?;
        let mut g = Graph::new();
        let loss = td_loss(&mut g, &model, &online, &target, &batch, 0.99)?;
        g.backward(loss)?;
        let grads: Vec<_> = g
            .param_grads()
            .into_iter()
            .map(|(id, a)| (id, a.clone()))
            .collect();
        let f = |s: &ParamStore| -> Result<f64> {
            let mut g = Graph::inference();
            let l = td_loss(&mut g, &model, s, &target, &batch, 0.99)?;
            Ok(g.value(l).data()[0])
        };
        let (err, coords) = check_scalar(&online, &grads, f, 8, rng)?;
        reports.push(GradReport {
            name: format!("td_loss.{mixer}"),
            max_rel_err: err,
            tolerance: LOSS_TOLERANCE,
            coordinates: coords,
        });
    }
    Ok(())
}

/// Run every check. Deterministic for a given seed.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradReport>> {
    let mut r = Runner {
        rng: ChaCha8Rng::seed_from_u64(seed),
        reports: Vec::new(),
    };
    op_checks(&mut r)?;
    layer_checks(&mut r)?;
    agent_checks(&mut r)?;
    mixer_checks(&mut r)?;
    let Runner { mut rng, mut reports } = r;
    loss_checks(&mut reports, &mut rng)?;
    Ok(reports)
}
