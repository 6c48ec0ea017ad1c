mod common;

use common::{normal, rng};
use proptest::prelude::*;
use spectra_core::env::STATE_FEATURES;
use spectra_core::mixer::{vdn_mix, GlobalState, HyperMode, Mixer, MixerKind, StHyperNet, WeightQuery};
use spectra_core::model::{Model, ModelConfig};
use spectra_core::{Array, Error, ParamStore};

fn cfg(mixer: MixerKind) -> ModelConfig {
    ModelConfig {
        mixer,
        hidden: 8,
        heads: 2,
        rnn_hidden: 8,
        mixer_embed: 8,
        mixer_heads: 2,
        qmix_embed: 8,
        qmix_hyper_embed: 8,
        ..ModelConfig::default()
    }
}

fn state(m: usize, seed: u64) -> GlobalState {
    GlobalState {
        rows: normal(m, STATE_FEATURES, &mut rng(seed)),
    }
}

fn proj(x: &Array, w: &Array) -> Vec<Vec<f64>> {
    (0..x.rows())
        .map(|i| {
            (0..w.cols())
                .map(|c| (0..x.cols()).map(|t| x.get(i, t) * w.get(t, c)).sum())
                .collect()
        })
        .collect()
}

/// Weight matrix from the head-wise absolute dot products.
fn oracle_weights(net: &StHyperNet, store: &ParamStore, s: &GlobalState) -> Vec<Vec<f64>> {
    let keys = proj(&s.rows, store.get(net.weight_key));
    let queries = match net.weight_query {
        WeightQuery::State(id) => proj(&s.rows, store.get(id)),
        WeightQuery::Seed(id) => vec![store.get(id).data().to_vec()],
    };
    let dk = net.embed / net.heads;
    let scale = 1.0 / (net.heads as f64 * (dk as f64).sqrt());
    queries
        .iter()
        .map(|q| {
            keys.iter()
                .map(|k| {
                    (0..net.heads)
                        .map(|h| {
                            let dot: f64 = (h * dk..(h + 1) * dk).map(|c| q[c] * k[c]).sum();
                            dot.abs()
                        })
                        .sum::<f64>()
                        * scale
                })
                .collect()
        })
        .collect()
}

fn oracle_bias(net: &StHyperNet, store: &ParamStore, s: &GlobalState) -> Vec<f64> {
    let keys = proj(&s.rows, store.get(net.bias_key));
    let seed = store.get(net.bias_seed).data();
    let scale = 1.0 / (net.heads as f64 * (net.embed as f64).sqrt());
    keys.iter()
        .map(|k| scale * k.iter().zip(seed).map(|(a, b)| a * b).sum::<f64>())
        .collect()
}

#[test]
fn vdn_is_a_plain_sum() {
    assert_eq!(vdn_mix(&[1.0, -2.5, 4.0]).unwrap(), 2.5);
    assert!(matches!(vdn_mix(&[]), Err(Error::Empty(_))));
    let (model, store) = Model::new(cfg(MixerKind::Vdn), 3, 0).unwrap();
    let q = [0.5, 1.5, -3.0];
    assert_eq!(model.mixer.mix(&store, &q, &state(3, 1)).unwrap(), -1.0);
    assert_eq!(model.mixer.num_params(&store), 0);
}

#[test]
fn hypernet_outputs_match_oracle() {
    let (model, store) = Model::new(cfg(MixerKind::Spectra), 4, 2).unwrap();
    let Mixer::Spectra(mix) = &model.mixer else { panic!() };
    let s = state(4, 3);
    for net in [&mix.layer1, &mix.layer2] {
        let w = net.evaluate(&store, &s, HyperMode::Weights).unwrap();
        let want = oracle_weights(net, &store, &s);
        assert_eq!(w.rows(), want.len());
        for (i, row) in want.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                assert!((w.get(i, j) - v).abs() < 1e-12);
                assert!(w.get(i, j) >= 0.0);
            }
        }
        let b = net.evaluate(&store, &s, HyperMode::Bias).unwrap();
        for (got, want) in b.data().iter().zip(oracle_bias(net, &store, &s)) {
            assert!((got - want).abs() < 1e-12);
        }
    }
}

#[test]
fn spectra_mixer_matches_two_layer_oracle() {
    let m = 5;
    let (model, store) = Model::new(cfg(MixerKind::Spectra), m, 4).unwrap();
    let Mixer::Spectra(mix) = &model.mixer else { panic!() };
    let s = state(m, 5);
    let q: Vec<f64> = normal(1, m, &mut rng(6)).into_data();
    let w1 = oracle_weights(&mix.layer1, &store, &s);
    let b1 = oracle_bias(&mix.layer1, &store, &s);
    let w2 = &oracle_weights(&mix.layer2, &store, &s)[0];
    let b2 = oracle_bias(&mix.layer2, &store, &s);
    let mut want = b2.iter().sum::<f64>() / m as f64;
    for j in 0..m {
        let pre: f64 = (0..m).map(|i| q[i] * w1[i][j]).sum::<f64>() + b1[j];
        want += pre.max(0.0) * w2[j];
    }
    let got = model.mixer.mix(&store, &q, &s).unwrap();
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
}

#[test]
fn spectra_mixer_serves_any_team_size() {
    let (model, store) = Model::new(cfg(MixerKind::Spectra), 3, 7).unwrap();
    assert!(model.mixer.is_scalable());
    for m in [1, 2, 3, 7, 12] {
        model.mixer.check_agents(m).unwrap();
        let q = vec![0.1; m];
        assert!(model.mixer.mix(&store, &q, &state(m, m as u64)).unwrap().is_finite());
    }
}

#[test]
fn qmix_rejects_other_team_sizes() {
    let (model, store) = Model::new(cfg(MixerKind::Qmix), 3, 8).unwrap();
    assert!(!model.mixer.is_scalable());
    model.mixer.check_agents(3).unwrap();
    assert!(matches!(
        model.mixer.check_agents(4),
        Err(Error::NonScalableMixer { built: 3, got: 4 })
    ));
    assert!(model.mixer.mix(&store, &[0.0; 3], &state(3, 1)).is_ok());
    assert!(model.mixer.mix(&store, &[0.0; 4], &state(4, 1)).is_err());
}

#[test]
fn q_and_state_lengths_must_agree() {
    let (model, store) = Model::new(cfg(MixerKind::Spectra), 3, 9).unwrap();
    assert!(model.mixer.mix(&store, &[0.0; 2], &state(3, 1)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn raising_one_agent_value_never_lowers_the_joint_value(
        seed in 0u64..500,
        m in 1usize..7,
        agent in 0usize..7,
        bump in 0.0f64..3.0,
        qmix in any::<bool>(),
    ) {
        let kind = if qmix { MixerKind::Qmix } else { MixerKind::Spectra };
        let (model, store) = Model::new(cfg(kind), m, seed).unwrap();
        let s = state(m, seed + 1);
        let q: Vec<f64> = normal(1, m, &mut rng(seed + 2)).into_data();
        let mut raised = q.clone();
        raised[agent % m] += bump;
        let base = model.mixer.mix(&store, &q, &s).unwrap();
        let up = model.mixer.mix(&store, &raised, &s).unwrap();
        prop_assert!(up >= base - 1e-12);
    }

    #[test]
    fn spectra_mixer_is_invariant_to_agent_order(seed in 0u64..500, m in 2usize..7, shift in 1usize..6) {
        let (model, store) = Model::new(cfg(MixerKind::Spectra), m, seed).unwrap();
        let s = state(m, seed + 1);
        let q: Vec<f64> = normal(1, m, &mut rng(seed + 2)).into_data();
        let perm: Vec<usize> = (0..m).map(|i| (i + shift) % m).collect();
        let q2: Vec<f64> = perm.iter().map(|&i| q[i]).collect();
        let rows: Vec<f64> = perm.iter().flat_map(|&i| s.rows.row_slice(i).to_vec()).collect();
        let s2 = GlobalState { rows: Array::matrix(m, STATE_FEATURES, rows).unwrap() };
        let a = model.mixer.mix(&store, &q, &s).unwrap();
        let b = model.mixer.mix(&store, &q2, &s2).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
    }
}
