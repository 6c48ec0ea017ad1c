//! Per-agent Q-networks over entity-wise observations.
//!
//! Three variants share one parameter layout:
//!
//! * [`AgentKind::Spectra`]: SAQA context, GRU, and the decoupled action head.
//! * [`AgentKind::SelfAttention`]: dense self-attention over entities,
//!   mean-pooled to a context vector, then the same GRU and head.
//! * [`AgentKind::MeanPool`]: the mean of visible entity embeddings, no
//!   attention at all.
//!
//! The decoupled head produces `q_own = h W_own` for actions on the agent
//! itself and, for every entity slot `j`,
//! `q_act[j] = sum_k <h W_act^(k), e_j W_key^(k)> / (n_h sqrt(d_k))`. The
//! values are keyed by entity id, never by input position.

use crate::array::Array;
use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::{AttentionConfig, AttentionLayer, EntityEmbeddings, GruCell, Linear};
use crate::params::{ParamId, ParamStore};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

pub type EntityId = usize;

/// Observation of one other entity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntityObs {
    pub id: EntityId,
    pub features: Vec<f64>,
    pub visible: bool,
}

/// One agent's entity-wise observation, partitioned into own/ally/enemy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationSet {
    pub agent_id: EntityId,
    pub own: Vec<f64>,
    pub allies: Vec<EntityObs>,
    pub enemies: Vec<EntityObs>,
}

impl ObservationSet {
    pub fn slots(&self) -> usize {
        1 + self.allies.len() + self.enemies.len()
    }

    /// Entity ids in slot order: self, allies, enemies.
    pub fn entity_ids(&self) -> Vec<EntityId> {
        std::iter::once(self.agent_id)
            .chain(self.allies.iter().map(|e| e.id))
            .chain(self.enemies.iter().map(|e| e.id))
            .collect()
    }

    pub fn visibility(&self) -> Vec<bool> {
        std::iter::once(true)
            .chain(self.allies.iter().map(|e| e.visible))
            .chain(self.enemies.iter().map(|e| e.visible))
            .collect()
    }
}

/// Legal actions: own actions by index, targeted actions by entity id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionMask {
    pub own: Vec<bool>,
    pub targets: Vec<(EntityId, bool)>,
}

impl ActionMask {
    pub fn target_allowed(&self, id: EntityId) -> bool {
        self.targets.iter().any(|(t, ok)| *t == id && *ok)
    }

    pub fn any(&self) -> bool {
        self.own.iter().any(|b| *b) || self.targets.iter().any(|(_, b)| *b)
    }

    pub fn allows(&self, choice: ActionChoice) -> bool {
        match choice {
            ActionChoice::Own(k) => self.own.get(k).copied().unwrap_or(false),
            ActionChoice::Target(id) => self.target_allowed(id),
        }
    }

    pub fn legal_choices(&self) -> Vec<ActionChoice> {
        let mut targets: Vec<EntityId> = self
            .targets
            .iter()
            .filter(|(_, ok)| *ok)
            .map(|(id, _)| *id)
            .collect();
        targets.sort_unstable();
        self.own
            .iter()
            .enumerate()
            .filter(|(_, ok)| **ok)
            .map(|(k, _)| ActionChoice::Own(k))
            .chain(targets.into_iter().map(ActionChoice::Target))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ActionChoice {
    Own(usize),
    Target(EntityId),
}

impl fmt::Display for ActionChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Own(k) => write!(f, "own:{k}"),
            Self::Target(id) => write!(f, "target:{id}"),
        }
    }
}

/// Masked action values of one agent. Masked entries hold `-inf`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionValueVector {
    pub own: Vec<f64>,
    /// Sorted by entity id.
    pub targets: Vec<(EntityId, f64)>,
}

impl ActionValueVector {
    pub fn target(&self, id: EntityId) -> Option<f64> {
        self.targets.iter().find(|(t, _)| *t == id).map(|(_, v)| *v)
    }
}

/// Argmax with ties broken by own actions first, then ascending entity id.
pub fn greedy_action(q: &ActionValueVector) -> Result<ActionChoice> {
    let mut best: Option<(f64, ActionChoice)> = None;
    let mut targets = q.targets.clone();
    targets.sort_by_key(|(id, _)| *id);
    let candidates = q
        .own
        .iter()
        .enumerate()
        .map(|(k, v)| (*v, ActionChoice::Own(k)))
        .chain(targets.into_iter().map(|(id, v)| (v, ActionChoice::Target(id))));
    for (v, choice) in candidates {
        if v == f64::NEG_INFINITY || v.is_nan() {
            continue;
        }
        if best.is_none_or(|(b, _)| v > b) {
            best = Some((v, choice));
        }
    }
    best.map(|(_, c)| c).ok_or(Error::FullyMaskedActions)
}

/// GRU hidden state of one agent, `[1, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenState(pub Array);

impl HiddenState {
    pub fn zeros(d: usize) -> Self {
        Self(Array::zeros(1, d))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AgentKind {
    Spectra,
    SelfAttention,
    MeanPool,
}

impl FromStr for AgentKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spectra" => Ok(Self::Spectra),
            "sa" | "self-attention" => Ok(Self::SelfAttention),
            "meanpool" => Ok(Self::MeanPool),
            other => Err(Error::Config(format!("unknown agent kind {other:?}"))),
        }
    }
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Spectra => "spectra",
            Self::SelfAttention => "sa",
            Self::MeanPool => "meanpool",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub own_dim: usize,
    pub other_dim: usize,
    pub hidden: usize,
    pub heads: usize,
    pub rnn_hidden: usize,
    pub own_actions: usize,
}

impl AgentConfig {
    pub fn attention(&self) -> Result<AttentionConfig> {
        AttentionConfig::new(self.hidden, self.heads)
    }
}

/// Observations of `groups` agents stacked for one batched forward pass.
/// Every group has the same number of allies and enemies.
#[derive(Clone, Debug)]
pub struct ObsBatch {
    pub groups: usize,
    pub n_allies: usize,
    pub n_enemies: usize,
    /// `[groups, own_dim]`
    pub own: Array,
    /// `[groups * n_allies, other_dim]`
    pub allies: Array,
    /// `[groups * n_enemies, other_dim]`
    pub enemies: Array,
    /// `groups * slots`
    pub visible: Vec<bool>,
    /// `groups * slots`
    pub entity_ids: Vec<EntityId>,
    /// `groups * (own_actions + slots)`, column layout of the q output.
    pub avail: Vec<bool>,
}

impl ObsBatch {
    pub fn slots(&self) -> usize {
        1 + self.n_allies + self.n_enemies
    }

    pub fn from_sets(sets: &[&ObservationSet], masks: &[&ActionMask]) -> Result<Self> {
        let first = sets.first().ok_or(Error::Empty("observation batch"))?;
        if masks.len() != sets.len() {
            return Err(shape_err("ObsBatch", "one action mask per observation"));
        }
        let n_allies = first.allies.len();
        let n_enemies = first.enemies.len();
        let own_dim = first.own.len();
        let other_dim = first
            .allies
            .first()
            .or(first.enemies.first())
            .map_or(0, |e| e.features.len());
        let mut own = Vec::new();
        let mut allies = Vec::new();
        let mut enemies = Vec::new();
        let mut visible = Vec::new();
        let mut entity_ids = Vec::new();
        let mut avail = Vec::new();
        for (obs, mask) in sets.iter().zip(masks) {
            if obs.allies.len() != n_allies || obs.enemies.len() != n_enemies {
                return Err(shape_err("ObsBatch", "team sizes differ within a batch"));
            }
            if obs.own.len() != own_dim {
                return Err(shape_err("ObsBatch", "own feature width differs"));
            }
            own.extend_from_slice(&obs.own);
            for (dst, src) in [(&mut allies, &obs.allies), (&mut enemies, &obs.enemies)] {
                for e in src {
                    if e.features.len() != other_dim {
                        return Err(shape_err("ObsBatch", "entity feature width differs"));
                    }
                    dst.extend_from_slice(&e.features);
                }
            }
            visible.extend(obs.visibility());
            let ids = obs.entity_ids();
            avail.extend_from_slice(&mask.own);
            avail.extend(ids.iter().map(|id| mask.target_allowed(*id)));
            entity_ids.extend(ids);
        }
        let g = sets.len();
        Ok(Self {
            groups: g,
            n_allies,
            n_enemies,
            own: Array::matrix(g, own_dim, own)?,
            allies: Array::matrix(g * n_allies, other_dim, allies)?,
            enemies: Array::matrix(g * n_enemies, other_dim, enemies)?,
            visible,
            entity_ids,
            avail,
        })
    }

    /// Concatenate batches with identical team sizes along the group axis.
    pub fn stack(parts: &[&ObsBatch]) -> Result<Self> {
        let first = parts.first().ok_or(Error::Empty("observation batch"))?;
        let mut out = ObsBatch {
            groups: 0,
            n_allies: first.n_allies,
            n_enemies: first.n_enemies,
            own: Array::zeros(0, 0),
            allies: Array::zeros(0, 0),
            enemies: Array::zeros(0, 0),
            visible: Vec::new(),
            entity_ids: Vec::new(),
            avail: Vec::new(),
        };
        let (mut own, mut allies, mut enemies) = (Vec::new(), Vec::new(), Vec::new());
        for p in parts {
            if p.n_allies != out.n_allies
                || p.n_enemies != out.n_enemies
                || p.own.cols() != first.own.cols()
                || p.allies.cols() != first.allies.cols()
                || p.enemies.cols() != first.enemies.cols()
            {
                return Err(shape_err("ObsBatch::stack", "batches differ in layout"));
            }
            out.groups += p.groups;
            own.extend_from_slice(p.own.data());
            allies.extend_from_slice(p.allies.data());
            enemies.extend_from_slice(p.enemies.data());
            out.visible.extend_from_slice(&p.visible);
            out.entity_ids.extend_from_slice(&p.entity_ids);
            out.avail.extend_from_slice(&p.avail);
        }
        let g = out.groups;
        out.own = Array::matrix(g, first.own.cols(), own)?;
        out.allies = Array::matrix(g * out.n_allies, first.allies.cols(), allies)?;
        out.enemies = Array::matrix(g * out.n_enemies, first.enemies.cols(), enemies)?;
        Ok(out)
    }

    /// `0 / -inf` additive mask over q columns.
    pub fn q_mask(&self) -> Array {
        let cols = self.avail.len() / self.groups;
        let data = self
            .avail
            .iter()
            .map(|a| if *a { 0.0 } else { f64::NEG_INFINITY })
            .collect();
        Array::matrix(self.groups, cols, data).expect("sized")
    }

    pub fn column_choice(&self, group: usize, col: usize, own_actions: usize) -> ActionChoice {
        if col < own_actions {
            ActionChoice::Own(col)
        } else {
            ActionChoice::Target(self.entity_ids[group * self.slots() + col - own_actions])
        }
    }

    pub fn choice_column(
        &self,
        group: usize,
        choice: ActionChoice,
        own_actions: usize,
    ) -> Option<usize> {
        match choice {
            ActionChoice::Own(k) => (k < own_actions).then_some(k),
            ActionChoice::Target(id) => {
                let n = self.slots();
                self.entity_ids[group * n..(group + 1) * n]
                    .iter()
                    .position(|e| *e == id)
                    .map(|p| own_actions + p)
            }
        }
    }
}

/// Graph outputs of one batched agent step.
pub struct AgentStep {
    /// `[groups, own_actions + slots]` before masking.
    pub q: Var,
    /// Same layout, illegal entries `-inf`.
    pub q_masked: Var,
    pub hidden: Var,
    /// SAQA weights `[groups * heads, slots]` (spectra agent only).
    pub attention: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct AgentNet {
    pub kind: AgentKind,
    pub cfg: AgentConfig,
    pub embed_own: Linear,
    pub embed_ally: Linear,
    pub embed_enemy: Linear,
    pub attention: Option<AttentionLayer>,
    pub gru: GruCell,
    pub w_own_q: ParamId,
    pub w_act_q: ParamId,
    pub w_act_k: ParamId,
}

impl AgentNet {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        kind: AgentKind,
        cfg: AgentConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let att = cfg.attention()?;
        let d = cfg.hidden;
        let h = cfg.rnn_hidden;
        Ok(Self {
            kind,
            cfg,
            embed_own: Linear::new(store, "agent.embed_own", cfg.own_dim, d, false, rng),
            embed_ally: Linear::new(store, "agent.embed_ally", cfg.other_dim, d, false, rng),
            embed_enemy: Linear::new(store, "agent.embed_enemy", cfg.other_dim, d, false, rng),
            attention: (kind != AgentKind::MeanPool)
                .then(|| AttentionLayer::new(store, "agent.attention", att, rng)),
            gru: GruCell::new(store, "agent.gru", d, h, rng),
            w_own_q: store.add_uniform("agent.w_own_q", h, cfg.own_actions, h, rng),
            w_act_q: store.add_uniform("agent.w_act_q", h, d, h, rng),
            w_act_k: store.add_uniform("agent.w_act_k", d, d, d, rng),
        })
    }

    pub fn action_width(&self, slots: usize) -> usize {
        self.cfg.own_actions + slots
    }

    /// Embed each entity with the linear map of its class.
    pub fn embed(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &ObsBatch,
    ) -> Result<EntityEmbeddings> {
        let own_in = g.input(batch.own.clone());
        let own = self.embed_own.forward(g, store, own_in)?;
        let mut parts = vec![(own, 1)];
        if batch.n_allies > 0 {
            let x = g.input(batch.allies.clone());
            parts.push((self.embed_ally.forward(g, store, x)?, batch.n_allies));
        }
        if batch.n_enemies > 0 {
            let x = g.input(batch.enemies.clone());
            parts.push((self.embed_enemy.forward(g, store, x)?, batch.n_enemies));
        }
        let all = g.interleave(&parts, batch.groups)?;
        Ok(EntityEmbeddings {
            own,
            all,
            groups: batch.groups,
            slots: batch.slots(),
            visible: batch.visible.clone(),
        })
    }

    /// Context vector fed to the GRU, plus SAQA weights when applicable.
    pub fn context(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        emb: &EntityEmbeddings,
    ) -> Result<(Var, Option<Var>)> {
        match (self.kind, &self.attention) {
            (AgentKind::Spectra, Some(att)) => {
                let out = att.saqa(g, store, emb)?;
                Ok((out.context, Some(out.weights)))
            }
            (AgentKind::SelfAttention, Some(att)) => {
                let out = att.self_attention(g, store, emb)?;
                let w = g.input(emb.visible_mean_weights());
                Ok((g.attn_apply(w, out.rows, 1, emb.slots, 1)?, None))
            }
            (AgentKind::MeanPool, _) => {
                if (0..emb.groups).any(|gi| !emb.visible[gi * emb.slots]) {
                    return Err(Error::NoVisibleEntity);
                }
                let w = g.input(emb.visible_mean_weights());
                Ok((g.attn_apply(w, emb.all, 1, emb.slots, 1)?, None))
            }
            _ => unreachable!("attention layer exists for attention agents"),
        }
    }

    /// Decoupled action head: `[q_own | q_act]`, unmasked.
    pub fn action_values(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        h: Var,
        emb: &EntityEmbeddings,
    ) -> Result<Var> {
        let w_own = g.bind(store, self.w_own_q);
        let q_own = g.matmul(h, w_own)?;
        let w_q = g.bind(store, self.w_act_q);
        let w_k = g.bind(store, self.w_act_k);
        let query = g.matmul(h, w_q)?;
        let keys = g.matmul(emb.all, w_k)?;
        let heads = self.cfg.heads;
        let dk = self.cfg.hidden / heads;
        // The per-head dot products summed over heads equal one dot product
        // over all concatenated head columns.
        let scale = 1.0 / (heads as f64 * (dk as f64).sqrt());
        let q_act = g.attn_scores(query, keys, 1, emb.slots, 1, scale)?;
        g.concat_cols(&[q_own, q_act])
    }

    pub fn forward_batch(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &ObsBatch,
        h_prev: Var,
    ) -> Result<AgentStep> {
        let hd = g.value(h_prev).dims();
        if hd != (batch.groups, self.cfg.rnn_hidden) {
            return Err(shape_err(
                "agent_forward",
                format!(
                    "hidden state {hd:?}, expected [{}, {}]",
                    batch.groups, self.cfg.rnn_hidden
                ),
            ));
        }
        let emb = self.embed(g, store, batch)?;
        let (ctx, attention) = self.context(g, store, &emb)?;
        let hidden = self.gru.step(g, store, ctx, h_prev)?;
        let q = self.action_values(g, store, hidden, &emb)?;
        let mask = g.input(batch.q_mask());
        let q_masked = g.add(q, mask)?;
        Ok(AgentStep {
            q,
            q_masked,
            hidden,
            attention,
        })
    }

    /// Unbatched forward pass for one agent.
    pub fn forward(
        &self,
        store: &ParamStore,
        obs: &ObservationSet,
        mask: &ActionMask,
        h_prev: &HiddenState,
    ) -> Result<(ActionValueVector, HiddenState)> {
        let batch = ObsBatch::from_sets(&[obs], &[mask])?;
        let mut g = Graph::inference();
        let h = g.input(h_prev.0.clone());
        let step = self.forward_batch(&mut g, store, &batch, h)?;
        let q = g.value(step.q_masked).row_slice(0).to_vec();
        Ok((
            split_action_values(&q, &batch.entity_ids, self.cfg.own_actions),
            HiddenState(g.value(step.hidden).clone()),
        ))
    }

    /// Names of parameters this agent uses.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![
            self.embed_own.weight,
            self.embed_ally.weight,
            self.embed_enemy.weight,
        ];
        if let Some(a) = &self.attention {
            ids.extend([a.w_query, a.w_key, a.w_value, a.ln_gain, a.ln_bias]);
        }
        ids.extend([
            self.gru.w_input,
            self.gru.w_hidden,
            self.gru.b_input,
            self.gru.b_hidden,
            self.w_own_q,
            self.w_act_q,
            self.w_act_k,
        ]);
        ids
    }

    pub fn num_params(&self, store: &ParamStore) -> usize {
        self.param_ids().iter().map(|id| store.get(*id).len()).sum()
    }
}

/// Split one q row (`[own | slots]`) into own values and id-keyed targets.
pub fn split_action_values(
    row: &[f64],
    entity_ids: &[EntityId],
    own_actions: usize,
) -> ActionValueVector {
    let mut targets: Vec<(EntityId, f64)> = entity_ids
        .iter()
        .copied()
        .zip(row[own_actions..].iter().copied())
        .collect();
    targets.sort_by_key(|(id, _)| *id);
    ActionValueVector {
        own: row[..own_actions].to_vec(),
        targets,
    }
}
