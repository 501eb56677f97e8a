//! Iterative rejection finetuning.
//!
//! Each outer iteration samples responses from the currently chosen
//! checkpoint, keeps the correct ones, and retrains from the base model by
//! maximum likelihood on that set, stopping at the first epoch where
//! validation accuracy drops. Maximizing log-likelihood of correct
//! responses carries the same gradient as baseline-free REINFORCE with the
//! binary reward, which `restem_gradient` / `reinforce_gradient` verify
//! numerically.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{PolicyCheckpoint, RunState, CHECKPOINT_VERSION};
use crate::env::{Env, Trajectory};
use crate::error::{Error, Result};
use crate::metrics::IterationMetrics;
use crate::optim::{Adam, AdamConfig};
use crate::policy::{Grad, Policy, PolicySnapshot};
use crate::rollout;

use super::{greedy_accuracy, mean_exact_kl, sampled_accuracy, RunEvent, TaskSets};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RestemConfig {
    /// Outer sample-filter-retrain iterations.
    pub iterations: u32,
    pub samples_per_prompt: usize,
    /// Maximum finetuning epochs per iteration (early-stopped on
    /// validation).
    pub epochs: u32,
    pub lr: f64,
    pub minibatch_trajs: usize,
    pub temperature: f64,
    pub eval_rounds: u32,
    pub eval_temperature: f64,
    pub eval_subset: usize,
}

impl Default for RestemConfig {
    fn default() -> Self {
        Self {
            iterations: 3,
            samples_per_prompt: 8,
            epochs: 8,
            lr: 1e-3,
            minibatch_trajs: 16,
            temperature: 0.6,
            eval_rounds: 16,
            eval_temperature: 0.35,
            eval_subset: 128,
        }
    }
}

/// Gradient of the rejection-finetuning loss over a batch of sampled
/// responses: `-1/N sum_{tau: R=1} sum_t grad log pi(a_t|s_t)`, normalized
/// by the total sample count N (not just the correct ones) so it matches
/// the REINFORCE estimator exactly. Computed through the sequence
/// log-likelihood path.
pub fn restem_gradient(env: &Env, policy: &PolicySnapshot, trajs: &[Trajectory]) -> Grad {
    let mut grad = policy.zero_grad();
    let w = -1.0 / trajs.len() as f64;
    for traj in trajs.iter().filter(|t| t.ret == 1.0) {
        let states = traj.states(env);
        for t in 0..traj.len() {
            policy.accumulate_grad_log_prob(&states[t], traj.actions[t], w, &mut grad);
        }
    }
    grad
}

/// Baseline-free REINFORCE loss gradient over the same batch:
/// `-1/N sum_tau R(tau) sum_t grad log pi(a_t|s_t)`, computed through the
/// per-step score-function path.
pub fn reinforce_gradient(env: &Env, policy: &PolicySnapshot, trajs: &[Trajectory]) -> Grad {
    let mut grad = policy.zero_grad();
    let n = trajs.len() as f64;
    for traj in trajs {
        if traj.ret == 0.0 {
            continue; // zero-reward responses contribute nothing
        }
        let states = traj.states(env);
        for t in 0..traj.len() {
            let coeff = -traj.ret / n;
            policy.accumulate_grad_log_prob(&states[t], traj.actions[t], coeff, &mut grad);
        }
    }
    grad
}

/// The outer rejection-finetuning loop. Metrics are emitted once per
/// finetuning epoch with a global epoch counter as the iteration index.
pub fn restem_train(
    env: &Env,
    tasks: &TaskSets,
    reference: &PolicySnapshot,
    cfg: &RestemConfig,
    seed: u64,
    observer: &mut dyn FnMut(RunEvent<'_>) -> Result<()>,
) -> Result<super::ppo::PpoOutcome> {
    if cfg.iterations == 0 || cfg.epochs == 0 || cfg.samples_per_prompt == 0 {
        return Err(Error::Config("restem settings must be positive".into()));
    }
    let eval_train: &[crate::env::TaskInstance] = if cfg.eval_subset > 0 {
        &tasks.train[..cfg.eval_subset.min(tasks.train.len())]
    } else {
        &tasks.train
    };

    let mut chosen = reference.clone();
    let mut metrics_out = Vec::new();
    let mut gradient_steps = 0u64;
    let mut rollout_tokens = 0u64;
    let mut best_val_acc = f64::NEG_INFINITY;
    let mut best_iteration = None;
    let mut best_policy = None;
    let mut global_epoch = 0u64;

    for outer in 0..cfg.iterations {
        // sample from the chosen checkpoint and keep correct responses
        let jobs: Vec<(usize, usize)> = (0..tasks.train.len())
            .flat_map(|p| (0..cfg.samples_per_prompt).map(move |s| (p, s)))
            .collect();
        let sampled: Vec<Trajectory> = jobs
            .into_par_iter()
            .map(|(p, s)| {
                let mut rng =
                    crate::rng::stream(seed, &[0xe57e, outer as u64, p as u64, s as u64]);
                rollout::sample_trajectory(
                    env,
                    &chosen,
                    &tasks.train[p],
                    cfg.temperature,
                    &mut rng,
                )
            })
            .collect::<Result<_>>()?;
        rollout_tokens += sampled.iter().map(|t| t.len() as u64).sum::<u64>();
        let correct: Vec<Trajectory> = sampled.into_iter().filter(|t| t.ret == 1.0).collect();
        if correct.is_empty() {
            return Err(Error::Diverged(format!(
                "restem iteration {outer}: no sampled response was correct on any prompt"
            )));
        }

        // retrain from the base model on the correct set
        let mut policy = Policy::from_snapshot(reference);
        let mut opt = Adam::for_policy(AdamConfig::with_lr(cfg.lr), &policy);
        let mut shuffle_rng = crate::rng::stream(seed, &[0x54f, outer as u64]);
        let mut prev_val = f64::NEG_INFINITY;
        let mut prev_snapshot = policy.snapshot();

        for epoch in 0..cfg.epochs {
            let t0 = std::time::Instant::now();
            let mut order: Vec<usize> = (0..correct.len()).collect();
            order.shuffle(&mut shuffle_rng);
            for chunk in order.chunks(cfg.minibatch_trajs.max(1)) {
                let batch: Vec<Trajectory> =
                    chunk.iter().map(|&i| correct[i].clone()).collect();
                let snap = policy.snapshot();
                let grad = restem_gradient(env, &snap, &batch);
                if !grad.is_finite() {
                    return Err(Error::Diverged(format!(
                        "restem gradient non-finite at outer {outer} epoch {epoch}"
                    )));
                }
                opt.step_policy(&mut policy, &grad);
                gradient_steps += 1;
            }

            let snap = policy.snapshot();
            let eval_seed =
                |tag: u64| {
                    use rand::Rng;
                    crate::rng::stream(seed, &[0xe5e, global_epoch, tag]).gen::<u64>()
                };
            let train_acc = sampled_accuracy(
                env,
                &snap,
                eval_train,
                cfg.eval_temperature,
                cfg.eval_rounds,
                eval_seed(0),
            )?;
            let val_acc = sampled_accuracy(
                env,
                &snap,
                &tasks.val,
                cfg.eval_temperature,
                cfg.eval_rounds,
                eval_seed(1),
            )?;
            let test_acc = sampled_accuracy(
                env,
                &snap,
                &tasks.test,
                cfg.eval_temperature,
                cfg.eval_rounds,
                eval_seed(2),
            )?;
            let train_acc_greedy = greedy_accuracy(env, &snap, eval_train)?;
            let test_acc_greedy = greedy_accuracy(env, &snap, &tasks.test)?;
            let states: Vec<crate::env::TokenMdpState> = correct
                .iter()
                .take(32)
                .flat_map(|t| {
                    let mut s = t.states(env);
                    s.truncate(t.len());
                    s
                })
                .collect();
            let exact_kl = mean_exact_kl(&snap, reference, &states);

            let metrics = IterationMetrics {
                iteration: global_epoch,
                gradient_steps,
                rollout_tokens,
                train_acc,
                test_acc,
                val_acc,
                train_acc_greedy,
                test_acc_greedy,
                exact_kl,
                policy_loss: f64::NAN,
                value_loss: None,
            };
            let improved_best = val_acc > best_val_acc;
            if improved_best {
                best_val_acc = val_acc;
                best_iteration = Some(global_epoch);
                best_policy = Some(snap.clone());
            }
            let state = RunState {
                version: CHECKPOINT_VERSION,
                completed_iterations: global_epoch + 1,
                gradient_steps,
                rollout_tokens,
                policy: PolicyCheckpoint::new(&policy, &shuffle_rng),
                valnet: None,
                opt_policy: opt.clone(),
                opt_value: None,
                best_val_acc,
                best_iteration,
            };
            observer(RunEvent::Iteration {
                metrics: &metrics,
                wall_ms: t0.elapsed().as_millis() as u64,
                state: &state,
                improved_best,
            })?;
            metrics_out.push(metrics);
            global_epoch += 1;

            // first place validation drops: keep the previous checkpoint
            if val_acc < prev_val {
                chosen = prev_snapshot;
                break;
            }
            prev_val = val_acc;
            prev_snapshot = snap.clone();
            chosen = snap;
        }
    }

    Ok(super::ppo::PpoOutcome {
        metrics: metrics_out,
        value_audits: Vec::new(),
        top_action_audits: Vec::new(),
        final_policy: chosen,
        best_policy,
        best_iteration,
        best_val_acc,
        gradient_steps,
        rollout_tokens,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{generate_tasks, task_from_digits, Difficulty, TaskInstance, Vocab};
    use crate::policy::{Arch, PolicyConfig, PolicyParams};
    use rand::Rng;

    fn tiny() -> (Env, TaskInstance, Vocab) {
        let vocab = Vocab::new(2).unwrap();
        let diff = Difficulty { n: 2, base: 2 };
        let env = Env::for_difficulty(&diff).unwrap();
        let task = task_from_digits(&[1, 1], &diff, &vocab);
        (env, task, vocab)
    }

    fn random_tabular(vocab: Vocab, seed: u64) -> PolicySnapshot {
        let config = PolicyConfig {
            arch: Arch::Tabular,
            window: 6,
            d_emb: 0,
            d_hidden: 0,
        };
        let mut policy = Policy::new(vocab, config, 0).unwrap();
        let mut rng = crate::rng::stream(seed, &[0x7ab]);
        if let PolicyParams::Tabular(t) = policy.params_mut() {
            for a in 0..4u32 {
                for b in 0..4u32 {
                    let ctx = vec![vocab.pad(), vocab.pad(), vocab.pad(), vocab.pad(), a, b];
                    *t.row_mut(&ctx) = (0..4).map(|_| rng.gen_range(-0.5..0.5)).collect();
                }
            }
        }
        policy.snapshot()
    }

    #[test]
    fn restem_gradient_equals_reinforce_gradient() {
        let (env, task, vocab) = tiny();
        let policy = random_tabular(vocab, 5);
        let mut rng = crate::rng::stream(21, &[]);
        let trajs: Vec<Trajectory> = (0..64)
            .map(|_| rollout::sample_trajectory(&env, &policy, &task, 1.0, &mut rng).unwrap())
            .collect();
        assert!(
            trajs.iter().any(|t| t.ret == 1.0) && trajs.iter().any(|t| t.ret == 0.0),
            "batch should mix correct and incorrect responses"
        );
        let a = restem_gradient(&env, &policy, &trajs);
        let b = reinforce_gradient(&env, &policy, &trajs);
        let diff = a.max_abs_diff(&b);
        assert!(
            diff <= 1e-9,
            "max-likelihood-on-correct and binary-reward score gradients differ by {diff}"
        );
    }

    #[test]
    fn all_incorrect_batch_contributes_zero_gradient() {
        let (env, task, vocab) = tiny();
        let policy = random_tabular(vocab, 6);
        let mut rng = crate::rng::stream(33, &[]);
        let wrong: Vec<Trajectory> = (0..32)
            .map(|_| rollout::sample_trajectory(&env, &policy, &task, 1.0, &mut rng).unwrap())
            .filter(|t| t.ret == 0.0)
            .collect();
        assert!(!wrong.is_empty());
        let g = restem_gradient(&env, &policy, &wrong);
        assert_eq!(g.l2_norm(), 0.0);
    }

    #[test]
    fn restem_train_smoke_runs_and_is_deterministic() {
        let vocab = Vocab::new(2).unwrap();
        let diff = Difficulty { n: 2, base: 2 };
        let env = Env::for_difficulty(&diff).unwrap();
        let tasks = TaskSets {
            train: generate_tasks(1, 12, &diff, &vocab).unwrap(),
            val: generate_tasks(2, 6, &diff, &vocab).unwrap(),
            test: generate_tasks(3, 6, &diff, &vocab).unwrap(),
        };
        let reference = Policy::new(
            vocab,
            PolicyConfig {
                arch: Arch::Mlp,
                window: 6,
                d_emb: 4,
                d_hidden: 8,
            },
            11,
        )
        .unwrap()
        .snapshot();
        let cfg = RestemConfig {
            iterations: 2,
            samples_per_prompt: 8,
            epochs: 3,
            eval_rounds: 2,
            eval_subset: 6,
            temperature: 1.0,
            ..RestemConfig::default()
        };
        let run = || {
            restem_train(&env, &tasks, &reference, &cfg, 4, &mut |_| Ok(())).unwrap()
        };
        let a = run();
        let b = run();
        assert!(!a.metrics.is_empty());
        assert_eq!(
            serde_json::to_string(&a.metrics).unwrap(),
            serde_json::to_string(&b.metrics).unwrap()
        );
    }
}
