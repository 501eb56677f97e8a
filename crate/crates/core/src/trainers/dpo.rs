//! Preference-pair finetuning with the positive-response guard.
//!
//! For a pair (chosen y_w with reward 1, rejected y_l with reward 0):
//!
//! ```text
//! z    = beta * (dlog(y_w) - dlog(y_l)) - lambda * max(0, log pi_ref(y_w) - log pi(y_w))
//! loss = -log sigmoid(z),   dlog(y) = log pi(y|x) - log pi_ref(y|x)
//! ```
//!
//! The hinge keeps the chosen response's likelihood from dropping below its
//! reference value; it is exactly zero whenever the policy already assigns
//! y_w more mass than the reference.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{PolicyCheckpoint, RunState, CHECKPOINT_VERSION};
use crate::env::{Env, TaskInstance, Trajectory};
use crate::error::{Error, Result};
use crate::metrics::IterationMetrics;
use crate::optim::{Adam, AdamConfig};
use crate::policy::{Grad, Policy, PolicySnapshot};
use crate::rollout;

use super::{greedy_accuracy, mean_exact_kl, sampled_accuracy, RunEvent, TaskSets};

/// A prompt with one correct and one incorrect sampled response.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PreferencePair {
    pub task: TaskInstance,
    pub chosen: Trajectory,
    pub rejected: Trajectory,
}

impl PreferencePair {
    pub fn validate(&self) -> Result<()> {
        if self.chosen.ret != 1.0 || self.rejected.ret != 0.0 {
            return Err(Error::Contract(
                "preference pair needs chosen reward 1 and rejected reward 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DpoConfig {
    pub beta: f64,
    /// Weight of the positive hinge term.
    pub lambda_pos: f64,
    pub samples_per_prompt: usize,
    pub max_pairs_per_prompt: usize,
    pub epochs: u32,
    pub lr: f64,
    pub minibatch_pairs: usize,
    pub temperature: f64,
    pub eval_rounds: u32,
    pub eval_temperature: f64,
    pub eval_subset: usize,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self {
            beta: 0.3,
            lambda_pos: 5.0,
            samples_per_prompt: 16,
            max_pairs_per_prompt: 8,
            epochs: 8,
            lr: 1e-3,
            minibatch_pairs: 16,
            temperature: 0.6,
            eval_rounds: 16,
            eval_temperature: 0.35,
            eval_subset: 128,
        }
    }
}

fn sequence_log_prob(env: &Env, policy: &PolicySnapshot, traj: &Trajectory) -> f64 {
    let states = traj.states(env);
    (0..traj.len())
        .map(|t| policy.log_prob(&states[t], traj.actions[t]))
        .sum()
}

fn accumulate_sequence_grad(
    env: &Env,
    policy: &PolicySnapshot,
    traj: &Trajectory,
    coeff: f64,
    grad: &mut Grad,
) {
    let states = traj.states(env);
    for t in 0..traj.len() {
        policy.accumulate_grad_log_prob(&states[t], traj.actions[t], coeff, grad);
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Mean pair loss and its gradient with respect to the live policy.
pub fn dpo_positive_loss(
    env: &Env,
    policy: &PolicySnapshot,
    reference: &PolicySnapshot,
    pairs: &[&PreferencePair],
    beta: f64,
    lambda_pos: f64,
) -> Result<(f64, Grad)> {
    if pairs.is_empty() {
        return Err(Error::Contract("dpo loss over an empty pair batch".into()));
    }
    if !(beta > 0.0) || !(lambda_pos > 0.0) {
        return Err(Error::Config("dpo beta and lambda_pos must be positive".into()));
    }
    let n = pairs.len() as f64;
    let mut loss = 0.0;
    let mut grad = policy.zero_grad();
    for pair in pairs {
        let lp_w = sequence_log_prob(env, policy, &pair.chosen);
        let lp_l = sequence_log_prob(env, policy, &pair.rejected);
        let lp_ref_w = sequence_log_prob(env, reference, &pair.chosen);
        let lp_ref_l = sequence_log_prob(env, reference, &pair.rejected);

        let hinge_arg = lp_ref_w - lp_w;
        let hinge_active = hinge_arg > 0.0;
        let z = beta * ((lp_w - lp_ref_w) - (lp_l - lp_ref_l))
            - lambda_pos * hinge_arg.max(0.0);
        loss += softplus(-z) / n;

        let dloss_dz = (sigmoid(z) - 1.0) / n;
        let dz_dlp_w = beta + if hinge_active { lambda_pos } else { 0.0 };
        accumulate_sequence_grad(env, policy, &pair.chosen, dloss_dz * dz_dlp_w, &mut grad);
        accumulate_sequence_grad(env, policy, &pair.rejected, dloss_dz * -beta, &mut grad);
    }
    Ok((loss, grad))
}

/// Samples responses from `policy` and pairs correct with incorrect ones,
/// up to `max_pairs_per_prompt` per task.
pub fn build_preference_pairs(
    env: &Env,
    policy: &PolicySnapshot,
    tasks: &[TaskInstance],
    cfg: &DpoConfig,
    seed: u64,
) -> Result<Vec<PreferencePair>> {
    let per_task: Vec<Vec<PreferencePair>> = tasks
        .par_iter()
        .enumerate()
        .map(|(p, task)| {
            let mut rng = crate::rng::stream(seed, &[0xd90, p as u64]);
            let mut correct = Vec::new();
            let mut incorrect = Vec::new();
            for _ in 0..cfg.samples_per_prompt {
                let traj =
                    rollout::sample_trajectory(env, policy, task, cfg.temperature, &mut rng)?;
                if traj.ret == 1.0 {
                    correct.push(traj);
                } else {
                    incorrect.push(traj);
                }
            }
            Ok(correct
                .into_iter()
                .zip(incorrect)
                .take(cfg.max_pairs_per_prompt)
                .map(|(chosen, rejected)| PreferencePair {
                    task: task.clone(),
                    chosen,
                    rejected,
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(per_task.into_iter().flatten().collect())
}

/// Preference-pair training: build pairs from the reference policy once,
/// then minibatch epochs over them.
pub fn dpo_train(
    env: &Env,
    tasks: &TaskSets,
    reference: &PolicySnapshot,
    cfg: &DpoConfig,
    seed: u64,
    observer: &mut dyn FnMut(RunEvent<'_>) -> Result<()>,
) -> Result<super::ppo::PpoOutcome> {
    if cfg.epochs == 0 {
        return Err(Error::Config("dpo epochs must be >= 1".into()));
    }
    let pairs = build_preference_pairs(env, reference, &tasks.train, cfg, seed)?;
    if pairs.is_empty() {
        return Err(Error::Diverged(
            "no preference pairs: the reference policy never produced both a correct \
             and an incorrect response for any prompt"
                .into(),
        ));
    }
    let rollout_tokens: u64 = pairs
        .iter()
        .map(|p| (p.chosen.len() + p.rejected.len()) as u64)
        .sum();
    let eval_train: &[TaskInstance] = if cfg.eval_subset > 0 {
        &tasks.train[..cfg.eval_subset.min(tasks.train.len())]
    } else {
        &tasks.train
    };

    let mut policy = Policy::from_snapshot(reference);
    let mut opt = Adam::for_policy(AdamConfig::with_lr(cfg.lr), &policy);
    let mut shuffle_rng = crate::rng::stream(seed, &[0xd905]);
    let mut gradient_steps = 0u64;
    let mut metrics_out = Vec::new();
    let mut best_val_acc = f64::NEG_INFINITY;
    let mut best_iteration = None;
    let mut best_policy = None;

    for epoch in 0..cfg.epochs as u64 {
        let t0 = std::time::Instant::now();
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut losses = Vec::new();
        for chunk in order.chunks(cfg.minibatch_pairs.max(1)) {
            let batch: Vec<&PreferencePair> = chunk.iter().map(|&i| &pairs[i]).collect();
            let snap = policy.snapshot();
            let (loss, grad) =
                dpo_positive_loss(env, &snap, reference, &batch, cfg.beta, cfg.lambda_pos)?;
            if !loss.is_finite() || !grad.is_finite() {
                return Err(Error::Diverged(format!(
                    "dpo loss non-finite at epoch {epoch}"
                )));
            }
            opt.step_policy(&mut policy, &grad);
            gradient_steps += 1;
            losses.push(loss);
        }

        let snap = policy.snapshot();
        let eval_seed = |tag: u64| {
            use rand::Rng;
            crate::rng::stream(seed, &[0xd9e, epoch, tag]).gen::<u64>()
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
        let states: Vec<crate::env::TokenMdpState> = pairs
            .iter()
            .take(16)
            .flat_map(|p| {
                let mut s = p.chosen.states(env);
                s.truncate(p.chosen.len());
                s
            })
            .collect();
        let exact_kl = mean_exact_kl(&snap, reference, &states);

        let metrics = IterationMetrics {
            iteration: epoch,
            gradient_steps,
            rollout_tokens,
            train_acc,
            test_acc,
            val_acc,
            train_acc_greedy,
            test_acc_greedy,
            exact_kl,
            policy_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            value_loss: None,
        };
        let improved_best = val_acc > best_val_acc;
        if improved_best {
            best_val_acc = val_acc;
            best_iteration = Some(epoch);
            best_policy = Some(snap.clone());
        }
        let state = RunState {
            version: CHECKPOINT_VERSION,
            completed_iterations: epoch + 1,
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
    }

    Ok(super::ppo::PpoOutcome {
        metrics: metrics_out,
        value_audits: Vec::new(),
        top_action_audits: Vec::new(),
        final_policy: policy.snapshot(),
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
    use crate::env::{task_from_digits, Difficulty, Vocab};
    use crate::policy::{Arch, PolicyConfig};

    fn tiny() -> (Env, TaskInstance, Vocab) {
        let vocab = Vocab::new(2).unwrap();
        let diff = Difficulty { n: 2, base: 2 };
        let env = Env::for_difficulty(&diff).unwrap();
        let task = task_from_digits(&[1, 0], &diff, &vocab);
        (env, task, vocab)
    }

    fn make_pair(env: &Env, task: &TaskInstance, vocab: &Vocab) -> PreferencePair {
        let good = crate::env::reference_solution(task, vocab);
        // flip the final answer token to make an incorrect response
        let mut bad = good.clone();
        let ans_pos = bad.len() - 2;
        bad[ans_pos] = (bad[ans_pos] + 1) % task.difficulty.base;
        let to_traj = |actions: Vec<u32>| {
            let mut state = crate::env::TokenMdpState::initial(task);
            let mut rewards = Vec::new();
            for &a in &actions {
                let (next, r) = env.step(&state, a, task).unwrap();
                rewards.push(r);
                state = next;
            }
            let ret = rewards.iter().sum();
            let logprobs = vec![0.0; rewards.len()];
            Trajectory {
                task: task.clone(),
                actions,
                rewards,
                logprobs,
                ret,
            }
        };
        let pair = PreferencePair {
            task: task.clone(),
            chosen: to_traj(good),
            rejected: to_traj(bad),
        };
        pair.validate().unwrap();
        pair
    }

    fn mlp_policy(vocab: Vocab, seed: u64) -> Policy {
        Policy::new(
            vocab,
            PolicyConfig {
                arch: Arch::Mlp,
                window: 6,
                d_emb: 4,
                d_hidden: 8,
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn loss_at_reference_is_log_two() {
        let (env, task, vocab) = tiny();
        let pair = make_pair(&env, &task, &vocab);
        let policy = mlp_policy(vocab, 3).snapshot();
        let (loss, _) =
            dpo_positive_loss(&env, &policy, &policy, &[&pair], 0.3, 5.0).unwrap();
        assert!(
            (loss - std::f64::consts::LN_2).abs() < 1e-12,
            "loss {loss} should be ln 2"
        );
    }

    #[test]
    fn hinge_is_inactive_when_chosen_gains_probability() {
        let (env, task, vocab) = tiny();
        let pair = make_pair(&env, &task, &vocab);
        // Tabular policy boosted along the chosen response: pi(y_w) > pi_ref(y_w).
        let config = PolicyConfig {
            arch: Arch::Tabular,
            window: 6,
            d_emb: 0,
            d_hidden: 0,
        };
        let reference = Policy::new(vocab, config, 0).unwrap().snapshot();
        let mut boosted = Policy::new(vocab, config, 0).unwrap();
        let states = pair.chosen.states(&env);
        for (t, &a) in pair.chosen.actions.iter().enumerate() {
            let ctx = states[t].context(6, vocab.pad());
            if let crate::policy::PolicyParams::Tabular(tab) = boosted.params_mut() {
                tab.row_mut(&ctx)[a as usize] = 2.0;
            }
        }
        let boosted = boosted.snapshot();
        let beta = 0.3;
        // With the hinge clamped at zero the loss must not depend on lambda.
        let (l_small, _) =
            dpo_positive_loss(&env, &boosted, &reference, &[&pair], beta, 1.0).unwrap();
        let (l_large, _) =
            dpo_positive_loss(&env, &boosted, &reference, &[&pair], beta, 1000.0).unwrap();
        assert_eq!(l_small, l_large, "active hinge would make these differ");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (env, task, vocab) = tiny();
        let pair = make_pair(&env, &task, &vocab);
        let reference = mlp_policy(vocab, 5).snapshot();
        let mut policy = mlp_policy(vocab, 6);
        let snap = policy.snapshot();
        let (_, analytic) =
            dpo_positive_loss(&env, &snap, &reference, &[&pair], 0.4, 2.0).unwrap();
        let analytic = analytic.flatten(snap.params());
        let mut rng = crate::rng::stream(11, &[]);
        let coords =
            crate::grad_check::random_coords(policy.params().n_params(), 64, &mut rng);
        let mut f = |p: &Policy| {
            dpo_positive_loss(&env, &p.snapshot(), &reference, &[&pair], 0.4, 2.0)
                .unwrap()
                .0
        };
        let report = crate::grad_check::check_coords(
            &mut policy,
            &mut f,
            &analytic,
            &coords,
            crate::grad_check::DEFAULT_EPS,
        );
        assert!(
            report.passes(1e-5),
            "worst rel err {} at coord {}",
            report.worst_rel_err,
            report.worst_coord
        );
    }

    #[test]
    fn empty_pair_batch_is_rejected() {
        let (env, _, vocab) = tiny();
        let policy = mlp_policy(vocab, 1).snapshot();
        assert!(matches!(
            dpo_positive_loss(&env, &policy, &policy, &[], 0.3, 5.0),
            Err(Error::Contract(_))
        ));
    }
}
