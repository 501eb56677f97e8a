//! Versioned checkpoints with bit-exact round trips.
//!
//! Everything is JSON: floats serialize through the shortest representation
//! that parses back to the identical bits, so a save/load cycle reproduces
//! parameters and RNG state exactly. Files are written to a temp path and
//! renamed into place, keeping the last checkpoint valid if a run dies
//! mid-write.

use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::Vocab;
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::policy::{Policy, PolicyConfig, PolicyParams};
use crate::value::ValueNet;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Captured ChaCha state: seed, stream, and position within the stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos_hi: u64,
    pub word_pos_lo: u64,
    pub stream: u64,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let pos = rng.get_word_pos();
        Self {
            seed: rng.get_seed(),
            word_pos_hi: (pos >> 64) as u64,
            word_pos_lo: pos as u64,
            stream: rng.get_stream(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(((self.word_pos_hi as u128) << 64) | self.word_pos_lo as u128);
        rng
    }
}

/// A policy with everything needed to keep sampling exactly where a run
/// left off.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyCheckpoint {
    pub version: u32,
    pub vocab: Vocab,
    pub config: PolicyConfig,
    pub params: PolicyParams,
    pub rng: RngState,
}

impl PolicyCheckpoint {
    pub fn new(policy: &Policy, rng: &ChaCha8Rng) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            vocab: *policy.vocab(),
            config: *policy.config(),
            params: policy.params().clone(),
            rng: RngState::capture(rng),
        }
    }

    pub fn policy(&self) -> Policy {
        Policy::from_parts(self.vocab, self.config, self.params.clone())
    }
}

/// Full training state for crash-safe resume: nets, optimizer moments, RNG,
/// progress counters, and the best-validation bookkeeping.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunState {
    pub version: u32,
    /// Iterations fully completed so far.
    pub completed_iterations: u64,
    pub gradient_steps: u64,
    pub rollout_tokens: u64,
    pub policy: PolicyCheckpoint,
    pub valnet: Option<ValueNet>,
    pub opt_policy: Adam,
    pub opt_value: Option<Adam>,
    pub best_val_acc: f64,
    pub best_iteration: Option<u64>,
}

fn atomic_write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string(value)
        .map_err(|e| Error::Artifact(format!("serializing checkpoint: {e}")))?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, json)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let data = std::fs::read_to_string(path)
        .map_err(|e| Error::Artifact(format!("reading {}: {e}", path.display())))?;
    serde_json::from_str(&data)
        .map_err(|e| Error::Artifact(format!("parsing {}: {e}", path.display())))
}

pub fn save_policy(path: &Path, ckpt: &PolicyCheckpoint) -> Result<()> {
    atomic_write_json(path, ckpt)
}

pub fn load_policy(path: &Path) -> Result<PolicyCheckpoint> {
    let ckpt: PolicyCheckpoint = read_json(path)?;
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(Error::Artifact(format!(
            "unsupported checkpoint version {} in {}",
            ckpt.version,
            path.display()
        )));
    }
    Ok(ckpt)
}

pub fn save_run_state(path: &Path, state: &RunState) -> Result<()> {
    atomic_write_json(path, state)
}

pub fn load_run_state(path: &Path) -> Result<RunState> {
    let state: RunState = read_json(path)?;
    if state.version != CHECKPOINT_VERSION {
        return Err(Error::Artifact(format!(
            "unsupported run-state version {} in {}",
            state.version,
            path.display()
        )));
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::Arch;
    use rand::Rng;

    #[test]
    fn rng_state_round_trip_continues_the_stream() {
        let mut rng = crate::rng::stream(99, &[1, 2]);
        for _ in 0..13 {
            let _: u64 = rng.gen();
        }
        let saved = RngState::capture(&rng);
        let mut restored = saved.restore();
        for _ in 0..64 {
            assert_eq!(rng.gen::<u64>(), restored.gen::<u64>());
        }
    }

    #[test]
    fn policy_checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = Vocab::new(10).unwrap();
        let config = PolicyConfig {
            arch: Arch::Mlp,
            window: 6,
            d_emb: 5,
            d_hidden: 9,
        };
        let policy = Policy::new(vocab, config, 1234).unwrap();
        let rng = crate::rng::stream(7, &[]);
        let ckpt = PolicyCheckpoint::new(&policy, &rng);
        let path = dir.path().join("p.ckpt");
        save_policy(&path, &ckpt).unwrap();
        let back = load_policy(&path).unwrap();
        assert_eq!(
            back.params.content_hash(),
            policy.params().content_hash(),
            "parameter bits must survive the round trip"
        );
        assert_eq!(back.rng, ckpt.rng);
    }

    #[test]
    fn tabular_checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = Vocab::new(2).unwrap();
        let config = PolicyConfig {
            arch: Arch::Tabular,
            window: 4,
            d_emb: 0,
            d_hidden: 0,
        };
        let mut policy = Policy::new(vocab, config, 0).unwrap();
        if let PolicyParams::Tabular(t) = policy.params_mut() {
            t.row_mut(&[0, 1, 2, 3])[2] = 0.1 + 0.2;
        }
        let rng = crate::rng::stream(3, &[]);
        let ckpt = PolicyCheckpoint::new(&policy, &rng);
        let path = dir.path().join("t.ckpt");
        save_policy(&path, &ckpt).unwrap();
        let back = load_policy(&path).unwrap();
        assert_eq!(back.params.content_hash(), policy.params().content_hash());
    }

    #[test]
    fn load_rejects_wrong_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        let vocab = Vocab::new(2).unwrap();
        let config = PolicyConfig {
            arch: Arch::Tabular,
            window: 4,
            d_emb: 0,
            d_hidden: 0,
        };
        let policy = Policy::new(vocab, config, 0).unwrap();
        let rng = crate::rng::stream(3, &[]);
        let mut ckpt = PolicyCheckpoint::new(&policy, &rng);
        ckpt.version = 999;
        atomic_write_json(&path, &ckpt).unwrap();
        assert!(matches!(load_policy(&path), Err(Error::Artifact(_))));
    }
}
