//! Agent network plus mixer sharing one parameter store.

use crate::agent::{AgentConfig, AgentKind, AgentNet};
use crate::config::KvConfig;
use crate::env::{kv_parse, OTHER_FEATURES, OWN_ACTIONS, OWN_FEATURES, STATE_FEATURES};
use crate::error::{Error, Result};
use crate::mixer::{Mixer, MixerConfig, MixerKind};
use crate::params::ParamStore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub agent: AgentKind,
    pub mixer: MixerKind,
    pub hidden: usize,
    pub heads: usize,
    pub rnn_hidden: usize,
    pub mixer_embed: usize,
    pub mixer_heads: usize,
    pub qmix_embed: usize,
    pub qmix_hyper_embed: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            agent: AgentKind::Spectra,
            mixer: MixerKind::Vdn,
            hidden: 64,
            heads: 4,
            rnn_hidden: 64,
            mixer_embed: 32,
            mixer_heads: 4,
            qmix_embed: 32,
            qmix_hyper_embed: 64,
        }
    }
}

impl ModelConfig {
    pub fn agent_config(&self) -> AgentConfig {
        AgentConfig {
            own_dim: OWN_FEATURES,
            other_dim: OTHER_FEATURES,
            hidden: self.hidden,
            heads: self.heads,
            rnn_hidden: self.rnn_hidden,
            own_actions: OWN_ACTIONS,
        }
    }

    pub fn mixer_config(&self) -> MixerConfig {
        MixerConfig {
            state_dim: STATE_FEATURES,
            embed: self.mixer_embed,
            heads: self.mixer_heads,
            qmix_embed: self.qmix_embed,
            qmix_hyper_embed: self.qmix_hyper_embed,
        }
    }

    pub fn from_kv(kv: &KvConfig, section: &str) -> Result<Self> {
        let mut c = Self::default();
        for (key, value) in kv.section(section) {
            match key {
                "agent" => c.agent = value.parse()?,
                "mixer" => c.mixer = value.parse()?,
                "hidden" | "hidden_size" => c.hidden = kv_parse(key, value)?,
                "heads" | "n_head" => c.heads = kv_parse(key, value)?,
                "rnn_hidden" => c.rnn_hidden = kv_parse(key, value)?,
                "mixer_embed" | "hypernet_embed" => c.mixer_embed = kv_parse(key, value)?,
                "mixer_heads" | "mixing_n_head" => c.mixer_heads = kv_parse(key, value)?,
                "qmix_embed" | "mixing_embed_dim" => c.qmix_embed = kv_parse(key, value)?,
                "qmix_hyper_embed" => c.qmix_hyper_embed = kv_parse(key, value)?,
                other => return Err(Error::Config(format!("unknown model key {other:?}"))),
            }
        }
        Ok(c)
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub agent: AgentNet,
    pub mixer: Mixer,
}

impl Model {
    /// Build the networks and a freshly initialised store. `agents` only
    /// shapes the fixed-size QMIX baseline.
    pub fn new(cfg: ModelConfig, agents: usize, seed: u64) -> Result<(Self, ParamStore)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let agent = AgentNet::new(&mut store, cfg.agent, cfg.agent_config(), &mut rng)?;
        let mixer = Mixer::new(&mut store, cfg.mixer, cfg.mixer_config(), agents, &mut rng)?;
        Ok((Self { cfg, agent, mixer }, store))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spectra_manifest_ignores_team_size() {
        let cfg = ModelConfig {
            mixer: MixerKind::Spectra,
            ..ModelConfig::default()
        };
        let (_, a) = Model::new(cfg, 3, 1).unwrap();
        let (_, b) = Model::new(cfg, 6, 1).unwrap();
        assert_eq!(a.manifest(), b.manifest());
        let q = ModelConfig {
            mixer: MixerKind::Qmix,
            ..cfg
        };
        let (_, a) = Model::new(q, 3, 1).unwrap();
        let (_, b) = Model::new(q, 6, 1).unwrap();
        assert_ne!(a.manifest(), b.manifest());
    }
}
