//! Seedable m-vs-e micro-battle.
//!
//! Allies are learning agents; enemies follow a scripted focus-nearest
//! policy. Every unit commits to an action against the pre-step state, all
//! moves are applied, then ally attacks land, then attacks from the enemies
//! still alive. Attacks are locked on at decision time, so a legal attack
//! always connects.
//!
//! Observation features:
//!
//! * own: `[x/L, y/L, hp/hp_max, is_skirmisher, is_bruiser]`
//! * other (visible, alive): `[dx/L, dy/L, dist/L, hp/hp_max, is_skirmisher, is_bruiser]`
//! * other (hidden or dead): zeros, `visible = false`
//!
//! Own actions are `noop, north, south, east, west`; targeted actions attack
//! an enemy id and are legal iff the enemy is alive and within the
//! attacker's range.

use crate::agent::{ActionChoice, ActionMask, EntityId, EntityObs, ObservationSet};
use crate::array::Array;
use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::mixer::GlobalState;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;

pub const OWN_FEATURES: usize = 5;
pub const OTHER_FEATURES: usize = 6;
pub const STATE_FEATURES: usize = 2 * OWN_FEATURES;
pub const OWN_ACTIONS: usize = 5;
pub const WIN_BONUS: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Team {
    Ally,
    Enemy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum UnitType {
    Skirmisher,
    Bruiser,
}

impl UnitType {
    fn one_hot(self) -> [f64; 2] {
        match self {
            Self::Skirmisher => [1.0, 0.0],
            Self::Bruiser => [0.0, 1.0],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitStats {
    pub hp_max: f64,
    pub attack_range: f64,
    pub damage: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub id: EntityId,
    pub team: Team,
    pub pos: [f64; 2],
    pub hp: f64,
    pub unit_type: UnitType,
    pub alive: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub agents: usize,
    pub enemies: usize,
    pub arena: f64,
    /// `f64::INFINITY` sees everything.
    pub sight_range: f64,
    pub move_step: f64,
    pub max_steps: usize,
    pub seed: u64,
    pub skirmisher: UnitStats,
    pub bruiser: UnitStats,
    /// Enemy unit types copy the ally draw slot by slot.
    pub mirror_types: bool,
    /// When off, any living visible enemy may be targeted; out-of-range
    /// attacks then do nothing.
    pub action_mask: bool,
    /// Multiplier on scripted-enemy damage; the opponent's difficulty knob.
    pub enemy_damage_scale: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            agents: 3,
            enemies: 3,
            arena: 12.0,
            sight_range: 9.0,
            move_step: 1.0,
            max_steps: 40,
            seed: 0,
            skirmisher: UnitStats {
                hp_max: 30.0,
                attack_range: 4.0,
                damage: 6.0,
            },
            bruiser: UnitStats {
                hp_max: 60.0,
                attack_range: 2.5,
                damage: 8.0,
            },
            mirror_types: true,
            action_mask: true,
            enemy_damage_scale: 0.75,
        }
    }
}

impl EnvConfig {
    pub fn with_teams(mut self, agents: usize, enemies: usize) -> Self {
        self.agents = agents;
        self.enemies = enemies;
        self
    }

    pub fn stats(&self, t: UnitType) -> UnitStats {
        match t {
            UnitType::Skirmisher => self.skirmisher,
            UnitType::Bruiser => self.bruiser,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.agents == 0 || self.enemies == 0 {
            return Err(Error::Config("teams need at least one unit".into()));
        }
        if !(self.enemy_damage_scale >= 0.0) {
            return Err(Error::Config("enemy_damage_scale must be nonnegative".into()));
        }
        if !(self.arena > 0.0) || !(self.move_step > 0.0) || self.max_steps == 0 {
            return Err(Error::Config("arena, move_step and max_steps must be positive".into()));
        }
        for s in [self.skirmisher, self.bruiser] {
            if self.sight_range < s.attack_range {
                return Err(Error::Config("sight_range must be >= every attack_range".into()));
            }
            if !(s.hp_max > 0.0) || s.damage < 0.0 {
                return Err(Error::Config("unit stats must be positive".into()));
            }
        }
        Ok(())
    }

    /// Read keys under `[env]`; absent keys keep their defaults.
    pub fn from_kv(kv: &KvConfig, section: &str) -> Result<Self> {
        let mut c = Self::default();
        for (key, value) in kv.section(section) {
            match key {
                "agents" | "m" => c.agents = kv_parse(key, value)?,
                "enemies" | "e" => c.enemies = kv_parse(key, value)?,
                "arena" => c.arena = kv_parse(key, value)?,
                "sight_range" => {
                    c.sight_range = if value == "inf" {
                        f64::INFINITY
                    } else {
                        kv_parse(key, value)?
                    }
                }
                "move_step" => c.move_step = kv_parse(key, value)?,
                "max_steps" => c.max_steps = kv_parse(key, value)?,
                "seed" => c.seed = kv_parse(key, value)?,
                "mirror_types" => c.mirror_types = kv_parse(key, value)?,
                "action_mask" => c.action_mask = kv_parse(key, value)?,
                "enemy_damage_scale" => c.enemy_damage_scale = kv_parse(key, value)?,
                "skirmisher.hp" => c.skirmisher.hp_max = kv_parse(key, value)?,
                "skirmisher.range" => c.skirmisher.attack_range = kv_parse(key, value)?,
                "skirmisher.damage" => c.skirmisher.damage = kv_parse(key, value)?,
                "bruiser.hp" => c.bruiser.hp_max = kv_parse(key, value)?,
                "bruiser.range" => c.bruiser.attack_range = kv_parse(key, value)?,
                "bruiser.damage" => c.bruiser.damage = kv_parse(key, value)?,
                "enemy_policy" => {
                    if value != "focus-nearest" {
                        return Err(Error::Config(format!("unknown enemy_policy {value:?}")));
                    }
                }
                other => return Err(Error::Config(format!("unknown env key {other:?}"))),
            }
        }
        c.validate()?;
        Ok(c)
    }
}

pub(crate) fn kv_parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub observations: Vec<ObservationSet>,
    pub masks: Vec<ActionMask>,
    pub state: GlobalState,
    pub reward: f64,
    /// A team was wiped out.
    pub terminated: bool,
    /// The step limit was hit.
    pub truncated: bool,
    pub win: bool,
    pub damage_dealt: f64,
    pub damage_received: f64,
}

impl StepResult {
    pub fn done(&self) -> bool {
        self.terminated || self.truncated
    }
}

#[derive(Clone, Debug)]
pub struct MicroBattle {
    cfg: EnvConfig,
    entities: Vec<Entity>,
    t: usize,
    done: bool,
    enemy_hp_total: f64,
}

impl MicroBattle {
    /// Start an episode. Identical `(cfg, episode_seed)` give identical
    /// episodes.
    pub fn reset(cfg: &EnvConfig, episode_seed: u64) -> Result<(Self, StepResult)> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(
            cfg.seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(episode_seed),
        );
        let half = cfg.arena / 2.0;
        let draw_type = |rng: &mut ChaCha8Rng| {
            if rng.random_bool(0.5) {
                UnitType::Skirmisher
            } else {
                UnitType::Bruiser
            }
        };
        let mut entities = Vec::with_capacity(cfg.agents + cfg.enemies);
        let mut ally_types = Vec::with_capacity(cfg.agents);
        for id in 0..cfg.agents {
            let unit_type = draw_type(&mut rng);
            ally_types.push(unit_type);
            let pos = [rng.random_range(0.0..half), rng.random_range(0.0..cfg.arena)];
            entities.push(Entity {
                id,
                team: Team::Ally,
                pos,
                hp: cfg.stats(unit_type).hp_max,
                unit_type,
                alive: true,
            });
        }
        for k in 0..cfg.enemies {
            let unit_type = if cfg.mirror_types {
                ally_types[k % cfg.agents]
            } else {
                draw_type(&mut rng)
            };
            let pos = [
                rng.random_range(half..cfg.arena),
                rng.random_range(0.0..cfg.arena),
            ];
            entities.push(Entity {
                id: cfg.agents + k,
                team: Team::Enemy,
                pos,
                hp: cfg.stats(unit_type).hp_max,
                unit_type,
                alive: true,
            });
        }
        let enemy_hp_total = entities
            .iter()
            .filter(|e| e.team == Team::Enemy)
            .map(|e| cfg.stats(e.unit_type).hp_max)
            .sum();
        let env = Self {
            cfg: cfg.clone(),
            entities,
            t: 0,
            done: false,
            enemy_hp_total,
        };
        let first = env.result(0.0, 0.0, false, false, false);
        Ok((env, first))
    }

    /// Build an environment from explicit entities (tests and replays).
    pub fn from_entities(cfg: &EnvConfig, entities: Vec<Entity>) -> Result<Self> {
        cfg.validate()?;
        let allies = entities.iter().filter(|e| e.team == Team::Ally).count();
        let enemies = entities.len() - allies;
        if allies != cfg.agents || enemies != cfg.enemies {
            return Err(Error::Config("entity list does not match team sizes".into()));
        }
        let mut ids: Vec<EntityId> = entities.iter().map(|e| e.id).collect();
        ids.sort_unstable();
        if ids != (0..entities.len()).collect::<Vec<_>>()
            || entities
                .iter()
                .any(|e| (e.team == Team::Ally) != (e.id < cfg.agents))
        {
            return Err(Error::Config("ally ids must be 0..m, enemy ids m..m+e".into()));
        }
        let enemy_hp_total = entities
            .iter()
            .filter(|e| e.team == Team::Enemy)
            .map(|e| cfg.stats(e.unit_type).hp_max)
            .sum();
        Ok(Self {
            cfg: cfg.clone(),
            entities,
            t: 0,
            done: false,
            enemy_hp_total,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn entities(&self) -> &[Entity] {
        &self.entities
    }

    pub fn time(&self) -> usize {
        self.t
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Reorder internal enemy storage; observable behaviour must not change.
    pub fn permute_enemy_storage(&mut self, perm: &[usize]) {
        let (allies, enemies): (Vec<Entity>, Vec<Entity>) = self
            .entities
            .drain(..)
            .partition(|e| e.team == Team::Ally);
        assert_eq!(perm.len(), enemies.len(), "permutation size");
        self.entities = allies;
        self.entities
            .extend(perm.iter().map(|&p| enemies[p].clone()));
    }

    fn entity(&self, id: EntityId) -> &Entity {
        self.entities
            .iter()
            .find(|e| e.id == id)
            .expect("entity ids are dense")
    }

    fn sorted(&self, team: Team) -> Vec<&Entity> {
        let mut v: Vec<&Entity> = self.entities.iter().filter(|e| e.team == team).collect();
        v.sort_by_key(|e| e.id);
        v
    }

    fn dist(a: &Entity, b: &Entity) -> f64 {
        ((a.pos[0] - b.pos[0]).powi(2) + (a.pos[1] - b.pos[1]).powi(2)).sqrt()
    }

    fn own_features(&self, e: &Entity) -> Vec<f64> {
        let l = self.cfg.arena;
        let oh = e.unit_type.one_hot();
        vec![
            e.pos[0] / l,
            e.pos[1] / l,
            e.hp / self.cfg.stats(e.unit_type).hp_max,
            oh[0],
            oh[1],
        ]
    }

    fn other_obs(&self, me: &Entity, other: &Entity) -> EntityObs {
        let visible = other.alive && Self::dist(me, other) <= self.cfg.sight_range;
        let features = if visible {
            let l = self.cfg.arena;
            let oh = other.unit_type.one_hot();
            vec![
                (other.pos[0] - me.pos[0]) / l,
                (other.pos[1] - me.pos[1]) / l,
                Self::dist(me, other) / l,
                other.hp / self.cfg.stats(other.unit_type).hp_max,
                oh[0],
                oh[1],
            ]
        } else {
            vec![0.0; OTHER_FEATURES]
        };
        EntityObs {
            id: other.id,
            features,
            visible,
        }
    }

    /// Entity-wise observation of a living agent.
    pub fn observation_of(&self, agent: EntityId) -> Result<ObservationSet> {
        if agent >= self.cfg.agents {
            return Err(Error::Config(format!("{agent} is not an agent id")));
        }
        let me = self.entity(agent);
        if !me.alive {
            return Err(Error::DeadAgent(agent));
        }
        Ok(self.observation_unchecked(me))
    }

    fn observation_unchecked(&self, me: &Entity) -> ObservationSet {
        ObservationSet {
            agent_id: me.id,
            own: self.own_features(me),
            allies: self
                .sorted(Team::Ally)
                .into_iter()
                .filter(|e| e.id != me.id)
                .map(|e| self.other_obs(me, e))
                .collect(),
            enemies: self
                .sorted(Team::Enemy)
                .into_iter()
                .map(|e| self.other_obs(me, e))
                .collect(),
        }
    }

    /// Dead agents observe only themselves (hp 0) and may only noop.
    fn dead_observation(&self, me: &Entity) -> ObservationSet {
        let mut obs = self.observation_unchecked(me);
        for e in obs.allies.iter_mut().chain(obs.enemies.iter_mut()) {
            e.features.iter_mut().for_each(|v| *v = 0.0);
            e.visible = false;
        }
        obs
    }

    pub fn action_mask(&self, agent: EntityId) -> ActionMask {
        let me = self.entity(agent);
        let mut targets: Vec<(EntityId, bool)> = self
            .sorted(Team::Ally)
            .into_iter()
            .map(|e| (e.id, false))
            .collect();
        let range = self.cfg.stats(me.unit_type).attack_range;
        for e in self.sorted(Team::Enemy) {
            let ok = me.alive
                && e.alive
                && if self.cfg.action_mask {
                    Self::dist(me, e) <= range
                } else {
                    Self::dist(me, e) <= self.cfg.sight_range
                };
            targets.push((e.id, ok));
        }
        let mut own = vec![false; OWN_ACTIONS];
        own[0] = true;
        if me.alive {
            own.iter_mut().for_each(|o| *o = true);
        }
        ActionMask { own, targets }
    }

    /// Per-agent rows: own absolute features ++ mean over living enemies.
    pub fn global_state(&self) -> GlobalState {
        let living: Vec<&Entity> = self
            .sorted(Team::Enemy)
            .into_iter()
            .filter(|e| e.alive)
            .collect();
        let mut pooled = vec![0.0; OWN_FEATURES];
        for e in &living {
            for (p, v) in pooled.iter_mut().zip(self.own_features(e)) {
                *p += v;
            }
        }
        if !living.is_empty() {
            pooled.iter_mut().for_each(|p| *p /= living.len() as f64);
        }
        let mut data = Vec::with_capacity(self.cfg.agents * STATE_FEATURES);
        for a in self.sorted(Team::Ally) {
            data.extend(self.own_features(a));
            data.extend_from_slice(&pooled);
        }
        GlobalState {
            rows: Array::matrix(self.cfg.agents, STATE_FEATURES, data).expect("sized"),
        }
    }

    fn result(
        &self,
        reward: f64,
        damage_dealt: f64,
        terminated: bool,
        truncated: bool,
        win: bool,
    ) -> StepResult {
        let allies = self.sorted(Team::Ally);
        StepResult {
            observations: allies
                .iter()
                .map(|a| {
                    if a.alive {
                        self.observation_unchecked(a)
                    } else {
                        self.dead_observation(a)
                    }
                })
                .collect(),
            masks: allies.iter().map(|a| self.action_mask(a.id)).collect(),
            state: self.global_state(),
            reward,
            terminated,
            truncated,
            win,
            damage_dealt,
            damage_received: 0.0,
        }
    }

    fn nearest<'a>(&'a self, me: &Entity, team: Team, within: f64) -> Option<&'a Entity> {
        self.sorted(team)
            .into_iter()
            .filter(|e| e.alive && Self::dist(me, e) <= within)
            .min_by(|a, b| {
                Self::dist(me, a)
                    .total_cmp(&Self::dist(me, b))
                    .then(a.id.cmp(&b.id))
            })
    }

    /// Apply one joint ally action, one entry per ally in id order.
    pub fn step(&mut self, actions: &[ActionChoice]) -> Result<StepResult> {
        if self.done {
            return Err(Error::Config("step called on a finished episode".into()));
        }
        if actions.len() != self.cfg.agents {
            return Err(Error::Config(format!(
                "{} actions for {} agents",
                actions.len(),
                self.cfg.agents
            )));
        }
        for (agent, a) in actions.iter().enumerate() {
            if !self.action_mask(agent).allows(*a) {
                return Err(Error::IllegalAction {
                    agent,
                    action: a.to_string(),
                });
            }
        }

        // Decisions against the pre-step state.
        let mut moves: Vec<(EntityId, [f64; 2])> = Vec::new();
        let mut attacks: Vec<(EntityId, EntityId)> = Vec::new();
        let step = self.cfg.move_step;
        for (agent, a) in actions.iter().enumerate() {
            let me = self.entity(agent);
            if !me.alive {
                continue;
            }
            match *a {
                ActionChoice::Own(0) => {}
                ActionChoice::Own(k) => {
                    let delta = match k {
                        1 => [0.0, step],
                        2 => [0.0, -step],
                        3 => [step, 0.0],
                        _ => [-step, 0.0],
                    };
                    moves.push((agent, delta));
                }
                ActionChoice::Target(id) => {
                    let range = self.cfg.stats(me.unit_type).attack_range;
                    if Self::dist(me, self.entity(id)) <= range {
                        attacks.push((agent, id));
                    }
                }
            }
        }
        for e in self.sorted(Team::Enemy) {
            if !e.alive {
                continue;
            }
            let range = self.cfg.stats(e.unit_type).attack_range;
            if let Some(target) = self.nearest(e, Team::Ally, range) {
                attacks.push((e.id, target.id));
            } else if let Some(target) = self.nearest(e, Team::Ally, f64::INFINITY) {
                let d = Self::dist(e, target);
                let len = step.min(d);
                if d > 0.0 {
                    moves.push((
                        e.id,
                        [
                            (target.pos[0] - e.pos[0]) / d * len,
                            (target.pos[1] - e.pos[1]) / d * len,
                        ],
                    ));
                }
            }
        }

        let arena = self.cfg.arena;
        for (id, delta) in moves {
            let e = self.entities.iter_mut().find(|e| e.id == id).expect("id");
            e.pos[0] = (e.pos[0] + delta[0]).clamp(0.0, arena);
            e.pos[1] = (e.pos[1] + delta[1]).clamp(0.0, arena);
        }

        // Ally volleys land first; enemies killed by them do not fire back.
        let mut dealt = 0.0;
        let mut received = 0.0;
        for team in [Team::Ally, Team::Enemy] {
            let mut incoming = vec![0.0; self.entities.len()];
            for (src, dst) in &attacks {
                let attacker = self.entity(*src);
                if attacker.team == team && attacker.alive {
                    let scale = match team {
                        Team::Ally => 1.0,
                        Team::Enemy => self.cfg.enemy_damage_scale,
                    };
                    incoming[*dst] += scale * self.cfg.stats(attacker.unit_type).damage;
                }
            }
            // Id order keeps the damage sums independent of storage order.
            let mut order: Vec<usize> = (0..self.entities.len()).collect();
            order.sort_by_key(|&i| self.entities[i].id);
            for i in order {
                let e = &mut self.entities[i];
                let dmg = incoming[e.id].min(e.hp);
                if dmg > 0.0 {
                    e.hp -= dmg;
                    match e.team {
                        Team::Enemy => dealt += dmg,
                        Team::Ally => received += dmg,
                    }
                    if e.hp <= 0.0 {
                        e.hp = 0.0;
                        e.alive = false;
                    }
                }
            }
        }

        self.t += 1;
        let allies_alive = self.entities.iter().any(|e| e.team == Team::Ally && e.alive);
        let enemies_alive = self.entities.iter().any(|e| e.team == Team::Enemy && e.alive);
        let win = !enemies_alive;
        let terminated = !allies_alive || !enemies_alive;
        let truncated = !terminated && self.t >= self.cfg.max_steps;
        self.done = terminated || truncated;
        let mut reward = (dealt - received) / self.enemy_hp_total;
        if win {
            reward += WIN_BONUS;
        }
        let mut out = self.result(reward, dealt, terminated, truncated, win);
        out.damage_received = received;
        Ok(out)
    }

    pub fn snapshot(&self) -> Vec<Entity> {
        let mut v = self.entities.clone();
        v.sort_by_key(|e| e.id);
        v
    }
}

/// One line of a JSON-lines replay trace.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TraceStep {
    pub t: usize,
    pub actions: Vec<ActionChoice>,
    pub reward: f64,
    pub terminated: bool,
    pub truncated: bool,
    pub win: bool,
    pub entities: Vec<Entity>,
}

pub fn write_trace<W: Write>(mut out: W, steps: &[TraceStep]) -> Result<()> {
    for s in steps {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Shared random policy helper: uniform over legal actions.
pub fn random_legal_action<R: Rng + ?Sized>(mask: &ActionMask, rng: &mut R) -> ActionChoice {
    let legal = mask.legal_choices();
    legal[rng.random_range(0..legal.len())]
}
