//! Workbench for VM scheduling on dual-NUMA clusters.
//!
//! The crate is split along the data path: [`cluster`] holds the resource
//! state machine, [`trace`] generates and parses request streams, [`sim`]
//! replays them as scheduling episodes, [`heuristics`] provides rule-based
//! schedulers and the candidate filter, [`net`] is a small hand-rolled MLP
//! with Adam, [`agent`] ties net and simulator together into the decomposed
//! Double-DQN scheduler, and [`metrics`] aggregates run results.

pub mod agent;
pub mod cluster;
pub mod heuristics;
pub mod metrics;
pub mod net;
pub mod sim;
pub mod trace;

/// Builds a ChaCha generator from a master seed plus a stream tag, so every
/// consumer (trace generation, exploration, batch sampling, net init) gets an
/// independent, reproducible stream. Stateless derivation keeps checkpoint
/// resume exact: epoch-local generators never have to be serialized.
pub fn seed_rng(master: u64, tag: u64, epoch: u64, lane: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    let mut seed = [0u8; 32];
    seed[0..8].copy_from_slice(&master.to_le_bytes());
    seed[8..16].copy_from_slice(&tag.to_le_bytes());
    seed[16..24].copy_from_slice(&epoch.to_le_bytes());
    seed[24..32].copy_from_slice(&lane.to_le_bytes());
    rand_chacha::ChaCha8Rng::from_seed(seed)
}

/// Stream tags for [`seed_rng`].
pub mod seeds {
    pub const TRACE: u64 = 1;
    pub const EXPLORE: u64 = 2;
    pub const TRAIN: u64 = 3;
    pub const NET_INIT: u64 = 4;
    pub const EVAL: u64 = 5;
}
