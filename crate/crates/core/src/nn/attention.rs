//! Entity attention: single-agent query attention (SAQA) and dense
//! multi-head self-attention.
//!
//! Both layers read the same [`EntityEmbeddings`]: `groups` observers, each
//! with `slots` entity rows whose slot 0 is the observer itself. Hidden
//! entities keep their slot but are masked with `-inf` before the softmax,
//! so they receive exactly zero attention.
//!
//! SAQA uses only the observer's own embedding as the query. Per head `k`:
//!
//! ```text
//! att_k = softmax(q_self,k K_k^T / sqrt(d_k)) V_k
//! out   = LayerNorm(e_self + [att_1 .. att_nh])
//! ```
//!
//! which costs `O(n d)` per observer. Self-attention lets every entity query
//! every other entity (`O(n^2 d)`) and returns one row per entity.

use crate::array::Array;
use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::params::{ParamId, ParamStore};
use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    /// Model width `d_h`.
    pub hidden: usize,
    /// Head count `n_h`; must divide `hidden`.
    pub heads: usize,
}

impl AttentionConfig {
    pub fn new(hidden: usize, heads: usize) -> Result<Self> {
        if heads == 0 || hidden == 0 || hidden % heads != 0 {
            return Err(Error::Config(format!(
                "{heads} heads do not divide hidden size {hidden}"
            )));
        }
        Ok(Self { hidden, heads })
    }

    /// Per-head width `d_k = d_h / n_h`.
    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

/// Embedded observations of `groups` observers.
#[derive(Clone, Debug)]
pub struct EntityEmbeddings {
    /// `[groups, d_h]`, the observer's own embedding.
    pub own: Var,
    /// `[groups * slots, d_h]`, slot 0 of each group repeats `own`.
    pub all: Var,
    pub groups: usize,
    pub slots: usize,
    /// `groups * slots` visibility flags.
    pub visible: Vec<bool>,
}

impl EntityEmbeddings {
    fn validate(&self, g: &Graph, hidden: usize) -> Result<()> {
        if self.visible.len() != self.groups * self.slots {
            return Err(shape_err("attention", "visibility mask size"));
        }
        if g.value(self.all).dims() != (self.groups * self.slots, hidden)
            || g.value(self.own).dims() != (self.groups, hidden)
        {
            return Err(shape_err(
                "attention",
                format!(
                    "embeddings {:?}/{:?} for {} groups x {} slots of width {hidden}",
                    g.value(self.own).dims(),
                    g.value(self.all).dims(),
                    self.groups,
                    self.slots
                ),
            ));
        }
        if (0..self.groups).any(|gi| !self.visible[gi * self.slots]) {
            return Err(Error::NoVisibleEntity);
        }
        Ok(())
    }

    /// `0 / -inf` additive mask for score rows laid out as
    /// `(group * queries + i) * heads + h`.
    fn score_mask(&self, queries: usize, heads: usize) -> Array {
        let n = self.slots;
        let mut data = Vec::with_capacity(self.groups * queries * heads * n);
        for gi in 0..self.groups {
            let row: Vec<f64> = self.visible[gi * n..(gi + 1) * n]
                .iter()
                .map(|v| if *v { 0.0 } else { f64::NEG_INFINITY })
                .collect();
            for _ in 0..queries * heads {
                data.extend_from_slice(&row);
            }
        }
        Array::matrix(self.groups * queries * heads, n, data).expect("sized")
    }

    /// Averaging weights over visible slots, `[groups, slots]`.
    pub fn visible_mean_weights(&self) -> Array {
        let n = self.slots;
        let mut data = Vec::with_capacity(self.groups * n);
        for gi in 0..self.groups {
            let vis = &self.visible[gi * n..(gi + 1) * n];
            let count = vis.iter().filter(|v| **v).count().max(1) as f64;
            data.extend(vis.iter().map(|v| if *v { 1.0 / count } else { 0.0 }));
        }
        Array::matrix(self.groups, n, data).expect("sized")
    }
}

pub struct SaqaOutput {
    /// `[groups, d_h]` contextualised own embedding `e'`.
    pub context: Var,
    /// `[groups * heads, slots]` attention weights.
    pub weights: Var,
}

pub struct SelfAttentionOutput {
    /// `[groups * slots, d_h]`, one contextualised row per entity.
    pub rows: Var,
    /// `[groups * slots * heads, slots]`.
    pub weights: Var,
}

/// Query/key/value projections (heads concatenated column-wise, no bias)
/// followed by a residual connection and layer norm.
#[derive(Clone, Debug)]
pub struct AttentionLayer {
    pub cfg: AttentionConfig,
    pub w_query: ParamId,
    pub w_key: ParamId,
    pub w_value: ParamId,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
}

impl AttentionLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cfg: AttentionConfig,
        rng: &mut R,
    ) -> Self {
        let d = cfg.hidden;
        Self {
            cfg,
            w_query: store.add_uniform(format!("{name}.w_query"), d, d, d, rng),
            w_key: store.add_uniform(format!("{name}.w_key"), d, d, d, rng),
            w_value: store.add_uniform(format!("{name}.w_value"), d, d, d, rng),
            ln_gain: store.add_filled(format!("{name}.ln_gain"), 1, d, 1.0),
            ln_bias: store.add_filled(format!("{name}.ln_bias"), 1, d, 0.0),
        }
    }

    fn scale(&self) -> f64 {
        1.0 / (self.cfg.head_dim() as f64).sqrt()
    }

    /// Single-agent query attention.
    pub fn saqa(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        emb: &EntityEmbeddings,
    ) -> Result<SaqaOutput> {
        emb.validate(g, self.cfg.hidden)?;
        let heads = self.cfg.heads;
        let wq = g.bind(store, self.w_query);
        let wk = g.bind(store, self.w_key);
        let wv = g.bind(store, self.w_value);
        let q = g.matmul(emb.own, wq)?;
        let k = g.matmul(emb.all, wk)?;
        let v = g.matmul(emb.all, wv)?;
        let scores = g.attn_scores(q, k, 1, emb.slots, heads, self.scale())?;
        let mask = g.input(emb.score_mask(1, heads));
        let scores = g.add(scores, mask)?;
        let weights = g.softmax_rows(scores)?;
        let att = g.attn_apply(weights, v, 1, emb.slots, heads)?;
        let res = g.add(emb.own, att)?;
        let gain = g.bind(store, self.ln_gain);
        let bias = g.bind(store, self.ln_bias);
        let context = g.layer_norm(res, gain, bias)?;
        Ok(SaqaOutput { context, weights })
    }

    /// Dense all-pairs self-attention over each group's slots.
    pub fn self_attention(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        emb: &EntityEmbeddings,
    ) -> Result<SelfAttentionOutput> {
        emb.validate(g, self.cfg.hidden)?;
        let heads = self.cfg.heads;
        let n = emb.slots;
        let wq = g.bind(store, self.w_query);
        let wk = g.bind(store, self.w_key);
        let wv = g.bind(store, self.w_value);
        let q = g.matmul(emb.all, wq)?;
        let k = g.matmul(emb.all, wk)?;
        let v = g.matmul(emb.all, wv)?;
        let scores = g.attn_scores(q, k, n, n, heads, self.scale())?;
        let mask = g.input(emb.score_mask(n, heads));
        let scores = g.add(scores, mask)?;
        let weights = g.softmax_rows(scores)?;
        let att = g.attn_apply(weights, v, n, n, heads)?;
        let res = g.add(emb.all, att)?;
        let gain = g.bind(store, self.ln_gain);
        let bias = g.bind(store, self.ln_bias);
        let rows = g.layer_norm(res, gain, bias)?;
        Ok(SelfAttentionOutput { rows, weights })
    }
}
