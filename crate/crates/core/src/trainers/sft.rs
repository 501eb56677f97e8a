//! Maximum-likelihood pretraining on reference solutions. The resulting
//! snapshot serves as both the initial policy and the frozen reference for
//! the KL penalty.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{Env, TaskInstance, TokenMdpState};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::policy::{Grad, Policy, PolicySnapshot};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SftConfig {
    pub epochs: u32,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            lr: 1e-3,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SftReport {
    /// Full-training-set mean token cross-entropy after each epoch.
    pub epoch_losses: Vec<f64>,
    pub heldout_greedy_acc: f64,
}

/// One supervised example: predict `target` from `state`.
struct TokenExample {
    state: TokenMdpState,
    target: u32,
}

fn build_examples(env: &Env, tasks: &[TaskInstance]) -> Vec<TokenExample> {
    let mut examples = Vec::new();
    for task in tasks {
        let mut state = TokenMdpState::initial(task);
        for &target in &crate::env::reference_solution(task, &env.vocab) {
            examples.push(TokenExample {
                state: state.clone(),
                target,
            });
            state = env.transition(&state, target).expect("reference fits env");
        }
    }
    examples
}

fn batch_loss_and_grad(
    policy: &PolicySnapshot,
    batch: &[&TokenExample],
) -> (f64, Grad) {
    // A fixed chunk count keeps the reduction order (and thus every bit)
    // independent of how many worker threads exist.
    let chunk = batch.len().div_ceil(8).max(1);
    let w = 1.0 / batch.len() as f64;
    let parts: Vec<(f64, Grad)> = batch
        .par_chunks(chunk)
        .map(|examples| {
            let mut grad = policy.zero_grad();
            let mut loss = 0.0;
            for ex in examples {
                loss -= w * policy.log_prob(&ex.state, ex.target);
                // d(-log pi)/d(params) accumulated directly
                policy.accumulate_grad_log_prob(&ex.state, ex.target, -w, &mut grad);
            }
            (loss, grad)
        })
        .collect();
    let mut grad = policy.zero_grad();
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l;
        grad.axpy(1.0, g);
    }
    (loss, grad)
}

fn full_loss(policy: &PolicySnapshot, examples: &[TokenExample]) -> f64 {
    let chunk = examples.len().div_ceil(64).max(1);
    let parts: Vec<f64> = examples
        .par_chunks(chunk)
        .map(|chunk| {
            chunk
                .iter()
                .map(|ex| -policy.log_prob(&ex.state, ex.target))
                .sum::<f64>()
        })
        .collect();
    parts.iter().sum::<f64>() / examples.len() as f64
}

/// Trains `policy` to maximize the likelihood of the reference solutions.
/// Returns the trained policy and a report with per-epoch training losses
/// and held-out greedy accuracy. Zero epochs returns the initialization
/// untouched (accuracy still measured).
pub fn sft_pretrain(
    mut policy: Policy,
    env: &Env,
    train: &[TaskInstance],
    heldout: &[TaskInstance],
    cfg: &SftConfig,
    seed: u64,
) -> Result<(Policy, SftReport)> {
    if train.is_empty() {
        return Err(Error::Config("sft needs a non-empty task set".into()));
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config("sft batch size and lr must be positive".into()));
    }
    let examples = build_examples(env, train);
    let mut opt = Adam::for_policy(AdamConfig::with_lr(cfg.lr), &policy);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut rng = crate::rng::stream(seed, &[0x5f7]);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs as usize);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&TokenExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let snap = policy.snapshot();
            let (loss, grad) = batch_loss_and_grad(&snap, &batch);
            if !loss.is_finite() || !grad.is_finite() {
                return Err(Error::Diverged(format!(
                    "sft loss became non-finite at epoch {epoch}"
                )));
            }
            opt.step_policy(&mut policy, &grad);
        }
        epoch_losses.push(full_loss(&policy.snapshot(), &examples));
    }

    let heldout_greedy_acc = if heldout.is_empty() {
        f64::NAN
    } else {
        super::greedy_accuracy(env, &policy.snapshot(), heldout)?
    };
    Ok((
        policy,
        SftReport {
            epoch_losses,
            heldout_greedy_acc,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{generate_tasks, Difficulty, Vocab};
    use crate::policy::{Arch, PolicyConfig};

    fn tiny_setup() -> (Env, Vec<TaskInstance>, Vec<TaskInstance>, Policy) {
        let vocab = Vocab::new(2).unwrap();
        let diff = Difficulty { n: 2, base: 2 };
        let env = Env::for_difficulty(&diff).unwrap();
        let train = generate_tasks(11, 24, &diff, &vocab).unwrap();
        let heldout = generate_tasks(99, 16, &diff, &vocab).unwrap();
        let policy = Policy::new(
            vocab,
            PolicyConfig {
                arch: Arch::Mlp,
                window: 8,
                d_emb: 8,
                d_hidden: 16,
            },
            7,
        )
        .unwrap();
        (env, train, heldout, policy)
    }

    #[test]
    fn zero_epochs_leaves_parameters_unchanged() {
        let (env, train, heldout, policy) = tiny_setup();
        let before = policy.params().content_hash();
        let cfg = SftConfig {
            epochs: 0,
            ..SftConfig::default()
        };
        let (after, report) = sft_pretrain(policy, &env, &train, &heldout, &cfg, 1).unwrap();
        assert_eq!(after.params().content_hash(), before);
        assert!(report.epoch_losses.is_empty());
        assert!(report.heldout_greedy_acc.is_finite());
    }

    #[test]
    fn loss_is_non_increasing_and_heldout_accuracy_high_on_tiny() {
        let (env, train, heldout, policy) = tiny_setup();
        let cfg = SftConfig {
            epochs: 40,
            lr: 1e-2,
            batch_size: 32,
        };
        let (_, report) = sft_pretrain(policy, &env, &train, &heldout, &cfg, 1).unwrap();
        for w in report.epoch_losses.windows(2) {
            assert!(
                w[1] <= w[0] + 1e-9,
                "training loss increased across an epoch: {} -> {}",
                w[0],
                w[1]
            );
        }
        assert!(
            report.heldout_greedy_acc >= 0.9,
            "held-out greedy accuracy {} below 0.9",
            report.heldout_greedy_acc
        );
    }

    #[test]
    fn empty_task_set_is_rejected() {
        let (env, _, heldout, policy) = tiny_setup();
        let cfg = SftConfig::default();
        assert!(matches!(
            sft_pretrain(policy, &env, &[], &heldout, &cfg, 1),
            Err(Error::Config(_))
        ));
    }
}
