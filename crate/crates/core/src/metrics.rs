//! Per-iteration training metrics and line-delimited JSON persistence.
//!
//! `metrics.jsonl` holds only deterministic quantities, so repeated
//! single-threaded runs produce byte-identical files; wall-clock timings go
//! to a separate `timings.jsonl`.

use std::fs::OpenOptions;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One training iteration's worth of metrics. Accuracy fields are
/// fractions in [0, 1]; `train_acc`/`test_acc`/`val_acc` are the sampled
/// evaluation (low-temperature, averaged over rounds), with greedy decoding
/// reported alongside. `exact_kl` is KL(pi || pi_ref) summed over the
/// vocabulary and averaged over the iteration's sampled states — never the
/// sampled estimator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: u64,
    /// Cumulative optimizer steps on the policy.
    pub gradient_steps: u64,
    /// Cumulative tokens generated for training (trajectories plus value
    /// rollouts; evaluation rollouts are not counted).
    pub rollout_tokens: u64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub val_acc: f64,
    pub train_acc_greedy: f64,
    pub test_acc_greedy: f64,
    pub exact_kl: f64,
    pub policy_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub value_loss: Option<f64>,
}

/// Wall-clock sidecar record (deliberately outside `metrics.jsonl`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimingRecord {
    pub iteration: u64,
    pub wall_ms: u64,
}

pub fn append_jsonl<T: Serialize>(path: &Path, record: &T) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    let line = serde_json::to_string(record)
        .map_err(|e| Error::Artifact(format!("serializing jsonl record: {e}")))?;
    writeln!(f, "{line}")?;
    Ok(())
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    for r in records {
        let line = serde_json::to_string(r)
            .map_err(|e| Error::Artifact(format!("serializing jsonl record: {e}")))?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = std::fs::File::open(path)
        .map_err(|e| Error::Artifact(format!("opening {}: {e}", path.display())))?;
    let reader = std::io::BufReader::new(f);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| {
            Error::Artifact(format!("{} line {}: {e}", path.display(), i + 1))
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let rec = IterationMetrics {
            iteration: 3,
            gradient_steps: 24,
            rollout_tokens: 11111,
            train_acc: 0.5625,
            test_acc: 0.1 + 0.2, // deliberately non-representable nicely
            val_acc: 0.75,
            train_acc_greedy: 1.0,
            test_acc_greedy: 0.0,
            exact_kl: 1e-17,
            policy_loss: -0.037,
            value_loss: None,
        };
        append_jsonl(&path, &rec).unwrap();
        append_jsonl(&path, &rec).unwrap();
        let back: Vec<IterationMetrics> = read_jsonl(&path).unwrap();
        assert_eq!(back.len(), 2);
        for b in back {
            assert_eq!(b.test_acc.to_bits(), rec.test_acc.to_bits());
            assert_eq!(b.exact_kl.to_bits(), rec.exact_kl.to_bits());
        }
    }
}
