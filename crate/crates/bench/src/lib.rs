//! Shared workloads for the criterion benches.

use spectra_core::agent::{AgentKind, ObsBatch};
use spectra_core::model::{Model, ModelConfig};
use spectra_core::nn::AttentionConfig;
use spectra_core::props::random_observation;
use spectra_core::ParamStore;
use rand::SeedableRng;

/// Entity counts swept by the scaling benches.
pub const ENTITY_COUNTS: [usize; 5] = [5, 10, 20, 40, 80];

pub fn attention_config() -> AttentionConfig {
    AttentionConfig::new(64, 4).expect("64 splits into 4 heads")
}

/// An agent network plus a one-observer batch with `n` enemies and
/// `n - 1` allies.
pub fn agent_workload(kind: AgentKind, n: usize) -> (Model, ParamStore, ObsBatch) {
    let cfg = ModelConfig {
        agent: kind,
        ..ModelConfig::default()
    };
    let (model, store) = Model::new(cfg, n, 0).expect("valid config");
    let a = model.agent.cfg;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(n as u64);
    let (obs, mask) = random_observation(n, n, a.own_dim, a.other_dim, a.own_actions, &mut rng);
    let batch = ObsBatch::from_sets(&[&obs], &[&mask]).expect("consistent observation");
    (model, store, batch)
}
