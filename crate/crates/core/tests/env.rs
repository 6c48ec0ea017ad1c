mod common;

use common::{chi_square_p, rng};
use proptest::prelude::*;
use rand::Rng;
use spectra_core::agent::ActionChoice;
use spectra_core::env::{
    random_legal_action, write_trace, EnvConfig, Entity, MicroBattle, Team, TraceStep, UnitType,
    WIN_BONUS,
};
use spectra_core::Error;

fn unit(id: usize, team: Team, x: f64, y: f64, unit_type: UnitType, hp: f64) -> Entity {
    Entity {
        id,
        team,
        pos: [x, y],
        hp,
        unit_type,
        alive: hp > 0.0,
    }
}

const NOOP: ActionChoice = ActionChoice::Own(0);

#[test]
fn reset_is_deterministic_and_seed_sensitive() {
    let cfg = EnvConfig::default();
    let (_, a) = MicroBattle::reset(&cfg, 17).unwrap();
    let (_, b) = MicroBattle::reset(&cfg, 17).unwrap();
    let (_, c) = MicroBattle::reset(&cfg, 18).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn same_actions_give_same_trajectory() {
    let cfg = EnvConfig::default().with_teams(4, 5);
    let play = || {
        let (mut env, mut res) = MicroBattle::reset(&cfg, 3).unwrap();
        let mut r = rng(9);
        let mut out = vec![res.clone()];
        while !res.done() {
            let acts: Vec<_> = res.masks.iter().map(|m| random_legal_action(m, &mut r)).collect();
            res = env.step(&acts).unwrap();
            out.push(res.clone());
        }
        (out, env.snapshot())
    };
    assert_eq!(play(), play());
}

#[test]
fn one_on_one_observation_has_no_allies() {
    let cfg = EnvConfig::default().with_teams(1, 1);
    let (_, res) = MicroBattle::reset(&cfg, 0).unwrap();
    assert_eq!(res.observations.len(), 1);
    assert!(res.observations[0].allies.is_empty());
    assert_eq!(res.observations[0].enemies.len(), 1);
}

#[test]
fn placement_is_uniform_in_team_halves() {
    let cfg = EnvConfig::default().with_teams(1, 1);
    let bins = 8;
    let mut hist = vec![vec![0.0; bins]; 4];
    let mut skirmishers = 0.0;
    let resets = 10_000;
    for s in 0..resets {
        let (env, _) = MicroBattle::reset(&cfg, s).unwrap();
        let ally = &env.entities()[0];
        let enemy = &env.entities()[1];
        assert!(ally.pos[0] < 6.0 && enemy.pos[0] >= 6.0);
        let b = |v: f64, lo: f64, width: f64| (((v - lo) / width * bins as f64) as usize).min(bins - 1);
        hist[0][b(ally.pos[0], 0.0, 6.0)] += 1.0;
        hist[1][b(ally.pos[1], 0.0, 12.0)] += 1.0;
        hist[2][b(enemy.pos[0], 6.0, 6.0)] += 1.0;
        hist[3][b(enemy.pos[1], 0.0, 12.0)] += 1.0;
        if ally.unit_type == UnitType::Skirmisher {
            skirmishers += 1.0;
        }
    }
    let expected = vec![resets as f64 / bins as f64; bins];
    for (axis, h) in hist.iter().enumerate() {
        let p = chi_square_p(h, &expected);
        assert!(p > 0.01, "axis {axis}: p = {p}");
    }
    let half = resets as f64 / 2.0;
    let p = chi_square_p(&[skirmishers, resets as f64 - skirmishers], &[half, half]);
    assert!(p > 0.01, "unit types: p = {p}");
}

#[test]
fn all_noop_out_of_range_gives_zero_reward() {
    let cfg = EnvConfig::default().with_teams(2, 1);
    let ents = vec![
        unit(0, Team::Ally, 0.0, 0.0, UnitType::Skirmisher, 30.0),
        unit(1, Team::Ally, 0.0, 1.0, UnitType::Bruiser, 60.0),
        unit(2, Team::Enemy, 12.0, 12.0, UnitType::Bruiser, 60.0),
    ];
    let mut env = MicroBattle::from_entities(&cfg, ents.clone()).unwrap();
    let res = env.step(&[NOOP, NOOP]).unwrap();
    assert_eq!(res.reward, 0.0);
    assert!(!res.done());
    for (before, after) in ents.iter().zip(env.snapshot()) {
        assert_eq!(before.hp, after.hp);
    }
}

#[test]
fn lone_ally_kill_wins_with_bonus() {
    let cfg = EnvConfig::default().with_teams(1, 1);
    let damage = cfg.skirmisher.damage;
    let ents = vec![
        unit(0, Team::Ally, 3.0, 3.0, UnitType::Skirmisher, 30.0),
        unit(1, Team::Enemy, 4.0, 3.0, UnitType::Skirmisher, damage),
    ];
    let mut env = MicroBattle::from_entities(&cfg, ents).unwrap();
    let res = env.step(&[ActionChoice::Target(1)]).unwrap();
    let hp_total = cfg.skirmisher.hp_max;
    assert!(res.win && res.terminated && !res.truncated);
    assert!((res.reward - (damage / hp_total + WIN_BONUS)).abs() < 1e-12);
    assert!(!env.snapshot()[1].alive);
    // The enemy died before its own volley.
    assert_eq!(env.snapshot()[0].hp, 30.0);
    assert!(env.step(&[NOOP]).is_err());
}

#[test]
fn exchange_of_fire_charges_both_sides() {
    let cfg = EnvConfig::default().with_teams(1, 1);
    let ents = vec![
        unit(0, Team::Ally, 3.0, 3.0, UnitType::Bruiser, 60.0),
        unit(1, Team::Enemy, 4.0, 3.0, UnitType::Skirmisher, 30.0),
    ];
    let mut env = MicroBattle::from_entities(&cfg, ents).unwrap();
    let res = env.step(&[ActionChoice::Target(1)]).unwrap();
    let dealt = cfg.bruiser.damage;
    let received = cfg.skirmisher.damage * cfg.enemy_damage_scale;
    assert_eq!(res.damage_dealt, dealt);
    assert_eq!(res.damage_received, received);
    assert!((res.reward - (dealt - received) / 30.0).abs() < 1e-12);
}

#[test]
fn out_of_sight_enemy_is_zeroed_and_masked() {
    let cfg = EnvConfig::default().with_teams(1, 2);
    let ents = vec![
        unit(0, Team::Ally, 0.0, 0.0, UnitType::Skirmisher, 30.0),
        unit(1, Team::Enemy, 2.0, 0.0, UnitType::Skirmisher, 30.0),
        unit(2, Team::Enemy, 11.0, 11.0, UnitType::Bruiser, 60.0),
    ];
    let env = MicroBattle::from_entities(&cfg, ents).unwrap();
    let obs = env.observation_of(0).unwrap();
    let far = &obs.enemies[1];
    assert_eq!(far.id, 2);
    assert!(!far.visible);
    assert!(far.features.iter().all(|v| *v == 0.0));
    let mask = env.action_mask(0);
    assert!(mask.target_allowed(1));
    assert!(!mask.target_allowed(2));
    assert!(matches!(
        MicroBattle::from_entities(&cfg, env.snapshot()).unwrap().step(&[ActionChoice::Target(2)]),
        Err(Error::IllegalAction { agent: 0, .. })
    ));
}

#[test]
fn observation_matches_hand_computation() {
    let cfg = EnvConfig::default().with_teams(2, 1);
    let ents = vec![
        unit(0, Team::Ally, 3.0, 6.0, UnitType::Bruiser, 45.0),
        unit(1, Team::Ally, 3.0, 6.0, UnitType::Skirmisher, 15.0),
        unit(2, Team::Enemy, 6.0, 10.0, UnitType::Skirmisher, 30.0),
    ];
    let env = MicroBattle::from_entities(&cfg, ents).unwrap();
    let obs = env.observation_of(0).unwrap();
    assert_eq!(obs.agent_id, 0);
    assert_eq!(obs.own, vec![0.25, 0.5, 0.75, 0.0, 1.0]);
    // Co-located ally: zero offset and distance.
    assert_eq!(obs.allies[0].features, vec![0.0, 0.0, 0.0, 0.5, 1.0, 0.0]);
    // Enemy at offset (3, 4), distance 5.
    let want = [3.0 / 12.0, 4.0 / 12.0, 5.0 / 12.0, 1.0, 1.0, 0.0];
    for (a, b) in obs.enemies[0].features.iter().zip(want) {
        assert!((a - b).abs() < 1e-15);
    }
    assert!(obs.visibility()[0]);
}

#[test]
fn global_state_pools_living_enemies_only() {
    let cfg = EnvConfig::default().with_teams(1, 3);
    let ents = vec![
        unit(0, Team::Ally, 0.0, 0.0, UnitType::Skirmisher, 30.0),
        unit(1, Team::Enemy, 6.0, 0.0, UnitType::Skirmisher, 30.0),
        unit(2, Team::Enemy, 12.0, 12.0, UnitType::Bruiser, 0.0),
        unit(3, Team::Enemy, 12.0, 6.0, UnitType::Bruiser, 30.0),
    ];
    let env = MicroBattle::from_entities(&cfg, ents).unwrap();
    let s = env.global_state();
    assert_eq!(s.rows.dims(), (1, 10));
    // Mean of enemies 1 and 3: x (0.5 + 1)/2, y (0 + 0.5)/2, hp (1 + 0.5)/2,
    // one-hot (0.5, 0.5).
    let want = [0.0, 0.0, 1.0, 1.0, 0.0, 0.75, 0.25, 0.75, 0.5, 0.5];
    for (a, b) in s.rows.row_slice(0).iter().zip(want) {
        assert!((a - b).abs() < 1e-15, "{a} vs {b}");
    }
}

#[test]
fn single_enemy_state_is_its_own_features() {
    let cfg = EnvConfig::default().with_teams(2, 1);
    let (env, res) = MicroBattle::reset(&cfg, 4).unwrap();
    let e = &env.entities()[2];
    let want = [e.pos[0] / 12.0, e.pos[1] / 12.0, 1.0];
    for row in 0..2 {
        for (a, b) in res.state.rows.row_slice(row)[5..8].iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}

#[test]
fn enemy_storage_order_is_not_observable() {
    let cfg = EnvConfig::default().with_teams(3, 4);
    let (mut a, _) = MicroBattle::reset(&cfg, 8).unwrap();
    let mut b = a.clone();
    b.permute_enemy_storage(&[2, 0, 3, 1]);
    assert_eq!(a.global_state(), b.global_state());
    let mut r = rng(10);
    for _ in 0..cfg.max_steps {
        let masks: Vec<_> = (0..3).map(|i| a.action_mask(i)).collect();
        let acts: Vec<_> = masks.iter().map(|m| random_legal_action(m, &mut r)).collect();
        let ra = a.step(&acts).unwrap();
        let rb = b.step(&acts).unwrap();
        assert_eq!(ra, rb);
        if ra.done() {
            break;
        }
    }
}

#[test]
fn dead_agents_cannot_observe_or_act() {
    let cfg = EnvConfig::default().with_teams(2, 1);
    let ents = vec![
        unit(0, Team::Ally, 0.0, 0.0, UnitType::Skirmisher, 0.0),
        unit(1, Team::Ally, 1.0, 0.0, UnitType::Skirmisher, 30.0),
        unit(2, Team::Enemy, 12.0, 0.0, UnitType::Skirmisher, 30.0),
    ];
    let mut env = MicroBattle::from_entities(&cfg, ents).unwrap();
    assert!(matches!(env.observation_of(0), Err(Error::DeadAgent(0))));
    let mask = env.action_mask(0);
    assert_eq!(mask.legal_choices(), vec![NOOP]);
    assert!(matches!(
        env.step(&[ActionChoice::Own(1), NOOP]),
        Err(Error::IllegalAction { agent: 0, .. })
    ));
    env.step(&[NOOP, NOOP]).unwrap();
}

#[test]
fn unmasked_out_of_range_attack_does_nothing() {
    let cfg = EnvConfig {
        action_mask: false,
        ..EnvConfig::default().with_teams(1, 1)
    };
    let ents = vec![
        unit(0, Team::Ally, 0.0, 0.0, UnitType::Bruiser, 60.0),
        unit(1, Team::Enemy, 8.0, 0.0, UnitType::Bruiser, 60.0),
    ];
    let mut env = MicroBattle::from_entities(&cfg, ents).unwrap();
    assert!(env.action_mask(0).target_allowed(1));
    let res = env.step(&[ActionChoice::Target(1)]).unwrap();
    assert_eq!(res.damage_dealt, 0.0);
    assert_eq!(env.snapshot()[1].hp, 60.0);
}

#[test]
fn episode_truncates_at_max_steps() {
    let cfg = EnvConfig {
        max_steps: 3,
        ..EnvConfig::default().with_teams(1, 1)
    };
    let ents = vec![
        unit(0, Team::Ally, 0.0, 0.0, UnitType::Skirmisher, 30.0),
        unit(1, Team::Enemy, 12.0, 12.0, UnitType::Skirmisher, 30.0),
    ];
    let mut env = MicroBattle::from_entities(&cfg, ents).unwrap();
    // Retreat along the wall so the enemy never closes in.
    for t in 1..=3 {
        let res = env.step(&[ActionChoice::Own(4)]).unwrap();
        assert_eq!(res.truncated, t == 3);
        assert!(!res.terminated && !res.win);
    }
    assert!(env.is_done());
}

#[test]
fn trace_is_one_json_object_per_line() {
    let cfg = EnvConfig::default();
    let (mut env, mut res) = MicroBattle::reset(&cfg, 1).unwrap();
    let mut r = rng(11);
    let mut steps = Vec::new();
    while !res.done() {
        let acts: Vec<_> = res.masks.iter().map(|m| random_legal_action(m, &mut r)).collect();
        res = env.step(&acts).unwrap();
        steps.push(TraceStep {
            t: env.time(),
            actions: acts,
            reward: res.reward,
            terminated: res.terminated,
            truncated: res.truncated,
            win: res.win,
            entities: env.snapshot(),
        });
    }
    let mut buf = Vec::new();
    write_trace(&mut buf, &steps).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), steps.len());
    for (line, step) in lines.iter().zip(&steps) {
        let back: TraceStep = serde_json::from_str(line).unwrap();
        assert_eq!(back.t, step.t);
        assert_eq!(back.actions, step.actions);
        assert_eq!(back.entities, step.entities);
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = [
        EnvConfig::default().with_teams(0, 3),
        EnvConfig {
            enemy_damage_scale: -1.0,
            ..EnvConfig::default()
        },
        EnvConfig {
            sight_range: 1.0,
            ..EnvConfig::default()
        },
    ];
    for cfg in bad {
        assert!(MicroBattle::reset(&cfg, 0).is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn hp_lost_equals_damage_and_masks_are_sound(
        seed in 0u64..10_000,
        m in 1usize..6,
        e in 1usize..6,
        masked in any::<bool>(),
    ) {
        let cfg = EnvConfig { action_mask: masked, ..EnvConfig::default().with_teams(m, e) };
        let (mut env, mut res) = MicroBattle::reset(&cfg, seed).unwrap();
        let mut r = rng(seed);
        while !res.done() {
            let before = env.snapshot();
            for (agent, mask) in res.masks.iter().enumerate() {
                let me = &before[agent];
                for (id, ok) in &mask.targets {
                    let target = &before[*id];
                    let dist = ((me.pos[0] - target.pos[0]).powi(2) + (me.pos[1] - target.pos[1]).powi(2)).sqrt();
                    let reach = if masked { cfg.stats(me.unit_type).attack_range } else { cfg.sight_range };
                    let legal = me.alive && target.team == Team::Enemy && target.alive && dist <= reach;
                    prop_assert_eq!(*ok, legal);
                }
            }
            let acts: Vec<_> = res
                .masks
                .iter()
                .map(|mask| {
                    // Favour attacks so fights happen.
                    let legal = mask.legal_choices();
                    let attacks: Vec<_> = legal.iter().filter(|c| matches!(c, ActionChoice::Target(_))).collect();
                    if !attacks.is_empty() && r.random_bool(0.7) {
                        *attacks[r.random_range(0..attacks.len())]
                    } else {
                        legal[r.random_range(0..legal.len())]
                    }
                })
                .collect();
            res = env.step(&acts).unwrap();
            let after = env.snapshot();
            let lost = |team: Team| -> f64 {
                before.iter().zip(&after).filter(|(b, _)| b.team == team).map(|(b, a)| b.hp - a.hp).sum()
            };
            prop_assert!((lost(Team::Enemy) - res.damage_dealt).abs() < 1e-9);
            prop_assert!((lost(Team::Ally) - res.damage_received).abs() < 1e-9);
            prop_assert!(res.reward.is_finite());
            prop_assert!(after.iter().all(|u| u.hp >= 0.0 && (u.alive == (u.hp > 0.0))));
        }
    }
}
