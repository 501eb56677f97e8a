//! Clipped-surrogate policy optimization.
//!
//! One iteration: sample a batch of trajectories from the current policy,
//! estimate advantages (critic GAE or Monte-Carlo step advantages — the
//! only place the two variants differ), normalize them over the batch,
//! then take several epochs of minibatch steps on
//!
//! ```text
//! L = -1/N sum_traj sum_t [ min(r_t A_t, clip(r_t, 1-eps, 1+eps) A_t)
//!                           - beta * kl_hat_t ]
//! ```
//!
//! where `r_t` is the probability ratio against the iteration-start policy
//! and `kl_hat` is the per-sample KL estimator against the frozen
//! reference. The critic, when present, trains alongside on empirical
//! returns with a clipped squared loss.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::advantage::{
    gae_advantages, mc_advantages, normalize_advantages, segment_steps, AdvantageDump,
    AdvantageRecord, StepSegmentation,
};
use crate::analysis::{
    audit_value_predictions, top_action_trial, McEstimator, NetEstimator, TopActionRecord,
    ValueAuditRecord, ValueEstimator,
};
use crate::checkpoint::{PolicyCheckpoint, RunState, CHECKPOINT_VERSION};
use crate::env::{Env, Trajectory};
use crate::error::{Error, Result};
use crate::metrics::IterationMetrics;
use crate::optim::{Adam, AdamConfig};
use crate::policy::{Grad, Policy, PolicySnapshot};
use crate::rollout;
use crate::value::{value_net_loss, value_targets, ValueNet, ValueTarget};

use super::{greedy_accuracy, mean_exact_kl, sampled_accuracy, PpoConfig, TaskSets};

/// Where advantages come from: the learned critic (with GAE) or
/// Monte-Carlo rollouts at step boundaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueSource {
    ValueNet,
    McRollouts,
}

/// Callbacks emitted as training progresses, in a deterministic order.
pub enum RunEvent<'a> {
    Iteration {
        metrics: &'a IterationMetrics,
        wall_ms: u64,
        state: &'a RunState,
        improved_best: bool,
    },
    Audit {
        iteration: u64,
        values: &'a [ValueAuditRecord],
        trials: &'a [TopActionRecord],
        advantages: &'a [AdvantageDump],
    },
}

/// Everything a finished (or resumed-and-finished) run hands back.
pub struct PpoOutcome {
    pub metrics: Vec<IterationMetrics>,
    pub value_audits: Vec<ValueAuditRecord>,
    pub top_action_audits: Vec<TopActionRecord>,
    pub final_policy: PolicySnapshot,
    /// Best-validation policy seen during this process (absent if no
    /// iteration improved on the resumed baseline).
    pub best_policy: Option<PolicySnapshot>,
    pub best_iteration: Option<u64>,
    pub best_val_acc: f64,
    pub gradient_steps: u64,
    pub rollout_tokens: u64,
}

/// Clipped-surrogate loss with per-token KL penalty, averaged over
/// trajectories. Behavior log-probs recorded in the trajectories serve as
/// the ratio denominators. Returns the loss (to minimize) and its
/// gradient.
pub fn ppo_policy_loss(
    env: &Env,
    policy: &PolicySnapshot,
    reference: &PolicySnapshot,
    trajs: &[&Trajectory],
    advantages: &[&AdvantageRecord],
    clip_eps: f64,
    kl_beta: f64,
) -> Result<(f64, Grad)> {
    if trajs.len() != advantages.len() {
        return Err(Error::Contract(
            "one advantage record per trajectory required".into(),
        ));
    }
    for (traj, adv) in trajs.iter().zip(advantages) {
        if traj.len() != adv.per_token.len() {
            return Err(Error::Contract(format!(
                "advantage length {} does not match trajectory length {}",
                adv.per_token.len(),
                traj.len()
            )));
        }
    }
    if !(clip_eps > 0.0) {
        return Err(Error::Config("clip_eps must be positive".into()));
    }
    let n = trajs.len() as f64;

    // Per-trajectory objective and gradient, combined in index order so the
    // result does not depend on thread scheduling.
    let parts: Vec<(f64, Grad)> = trajs
        .par_iter()
        .zip(advantages.par_iter())
        .map(|(traj, adv)| {
            let mut grad = policy.zero_grad();
            let mut obj = 0.0;
            let states = traj.states(env);
            for t in 0..traj.len() {
                let state = &states[t];
                let action = traj.actions[t];
                let a_hat = adv.per_token[t];

                let fwd = policy.forward(state);
                let log_probs = crate::policy::log_softmax(&fwd.logits);
                let lp = log_probs[action as usize];
                let ratio = (lp - traj.logprobs[t]).exp();
                let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps);
                let surr_unclipped = ratio * a_hat;
                let surr_clipped = clipped * a_hat;
                let (surr, mut dobj_dlp) = if surr_unclipped <= surr_clipped {
                    (surr_unclipped, ratio * a_hat)
                } else {
                    // clipped branch is the min; saturated, so no gradient
                    (surr_clipped, 0.0)
                };
                obj += surr;

                if kl_beta != 0.0 {
                    let d = reference.log_prob(state, action) - lp;
                    let kl_hat = (d.exp_m1() - d).max(0.0);
                    obj -= kl_beta * kl_hat;
                    // d(kl_hat)/d(lp) = 1 - exp(d)
                    dobj_dlp -= kl_beta * (1.0 - d.exp());
                }

                if dobj_dlp != 0.0 {
                    let probs: Vec<f64> = log_probs.iter().map(|l| l.exp()).collect();
                    let mut dlogits = probs;
                    for d in dlogits.iter_mut() {
                        *d = -dobj_dlp * *d;
                    }
                    dlogits[action as usize] += dobj_dlp;
                    policy.backward_logits(&fwd, &dlogits, &mut grad);
                }
            }
            (obj, grad)
        })
        .collect();

    let mut total_obj = 0.0;
    let mut grad = policy.zero_grad();
    for (obj, g) in &parts {
        total_obj += obj;
        grad.axpy(1.0, g);
    }
    // negate: maximize the objective by minimizing the loss
    grad.scale(-1.0 / n);
    Ok((-total_obj / n, grad))
}

enum IterationAdvantages {
    Gae(Vec<AdvantageRecord>),
    Mc(Vec<crate::advantage::McAdvantages>),
}

/// The full training loop. `resume` continues a checkpointed run to
/// `cfg.iterations`; the observer sees each iteration's metrics and run
/// state (for persistence) plus periodic value audits.
#[allow(clippy::too_many_arguments)]
pub fn run_ppo(
    env: &Env,
    tasks: &TaskSets,
    reference: &PolicySnapshot,
    cfg: &PpoConfig,
    source: ValueSource,
    seed: u64,
    resume: Option<RunState>,
    observer: &mut dyn FnMut(RunEvent<'_>) -> Result<()>,
) -> Result<PpoOutcome> {
    cfg.validate()?;
    if tasks.train.is_empty() || tasks.val.is_empty() || tasks.test.is_empty() {
        return Err(Error::Config("train/val/test splits must be non-empty".into()));
    }

    let mut policy;
    let mut valnet;
    let mut opt_policy;
    let mut opt_value;
    let mut master_rng;
    let mut gradient_steps;
    let mut rollout_tokens;
    let mut best_val_acc;
    let mut best_iteration;
    let start_iter;

    match resume {
        Some(state) => {
            policy = state.policy.policy();
            master_rng = state.policy.rng.restore();
            valnet = state.valnet;
            opt_policy = state.opt_policy;
            opt_value = state.opt_value;
            gradient_steps = state.gradient_steps;
            rollout_tokens = state.rollout_tokens;
            best_val_acc = state.best_val_acc;
            best_iteration = state.best_iteration;
            start_iter = state.completed_iterations;
        }
        None => {
            policy = Policy::from_snapshot(reference);
            valnet = match source {
                ValueSource::ValueNet => Some(ValueNet::from_policy(reference, seed ^ 0x7a11)?),
                ValueSource::McRollouts => None,
            };
            opt_policy = Adam::for_policy(AdamConfig::with_lr(cfg.lr_policy), &policy);
            opt_value = valnet
                .as_ref()
                .map(|vn| Adam::dense(AdamConfig::with_lr(cfg.lr_value), vn.n_params()));
            master_rng = crate::rng::stream(seed, &[0x9019]);
            gradient_steps = 0;
            rollout_tokens = 0;
            best_val_acc = f64::NEG_INFINITY;
            best_iteration = None;
            start_iter = 0;
        }
    }
    if source == ValueSource::ValueNet && valnet.is_none() {
        return Err(Error::Config("resume state lacks the value network".into()));
    }

    let eval_train: &[crate::env::TaskInstance] = if cfg.eval_subset > 0 {
        &tasks.train[..cfg.eval_subset.min(tasks.train.len())]
    } else {
        &tasks.train
    };

    let mut all_metrics = Vec::new();
    let mut all_value_audits = Vec::new();
    let mut all_trials = Vec::new();
    let mut best_policy = None;

    for iter in start_iter..cfg.iterations {
        let t0 = Instant::now();
        let behavior = policy.snapshot();

        // -- sample the batch ------------------------------------------------
        let prompt_idx: Vec<usize> = {
            let mut idx: Vec<usize> = (0..tasks.train.len()).collect();
            idx.shuffle(&mut crate::rng::stream(seed, &[0x5e1, iter]));
            (0..cfg.batch_prompts).map(|i| idx[i % idx.len()]).collect()
        };
        let traj_jobs: Vec<(usize, usize)> = (0..cfg.batch_prompts)
            .flat_map(|p| (0..cfg.samples_per_prompt).map(move |s| (p, s)))
            .collect();
        let trajs: Vec<Trajectory> = traj_jobs
            .into_par_iter()
            .map(|(p, s)| {
                let task = &tasks.train[prompt_idx[p]];
                let mut rng =
                    crate::rng::stream(seed, &[0x7247, iter, p as u64, s as u64]);
                rollout::sample_trajectory(env, &behavior, task, cfg.temperature, &mut rng)
            })
            .collect::<Result<_>>()?;
        rollout_tokens += trajs.iter().map(|t| t.len() as u64).sum::<u64>();

        // -- advantages -------------------------------------------------------
        let old_valnet = valnet.clone();
        let iteration_advs = match source {
            ValueSource::ValueNet => {
                let vn = valnet.as_ref().expect("critic present");
                let recs: Vec<AdvantageRecord> = trajs
                    .par_iter()
                    .map(|traj| gae_advantages(vn, env, traj, cfg.gae_lambda, cfg.gamma))
                    .collect::<Result<_>>()?;
                IterationAdvantages::Gae(recs)
            }
            ValueSource::McRollouts => {
                let mc: Vec<crate::advantage::McAdvantages> = trajs
                    .par_iter()
                    .enumerate()
                    .map(|(ti, traj)| {
                        let seg = segment_steps(traj, &env.vocab);
                        let mc_seed = crate::rng::stream(seed, &[0x3c4d, iter, ti as u64])
                            .gen::<u64>();
                        mc_advantages(
                            env,
                            &behavior,
                            traj,
                            &seg,
                            cfg.mc_k,
                            cfg.mc_temperature(),
                            mc_seed,
                        )
                    })
                    .collect::<Result<_>>()?;
                rollout_tokens += mc.iter().map(|m| m.rollout_tokens).sum::<u64>();
                IterationAdvantages::Mc(mc)
            }
        };
        let raw_records: Vec<AdvantageRecord> = match &iteration_advs {
            IterationAdvantages::Gae(recs) => recs.clone(),
            IterationAdvantages::Mc(mc) => mc.iter().map(|m| m.record.clone()).collect(),
        };
        let advantages = normalize_advantages(&raw_records)?;

        // -- optimize ---------------------------------------------------------
        let targets: Option<Vec<Vec<ValueTarget>>> = match source {
            ValueSource::ValueNet => {
                Some(trajs.iter().map(|t| value_targets(env, t)).collect())
            }
            ValueSource::McRollouts => None,
        };
        let mut policy_losses = Vec::new();
        let mut value_losses = Vec::new();
        let n_trajs = trajs.len();
        for _epoch in 0..cfg.epochs_per_iter {
            let mut order: Vec<usize> = (0..n_trajs).collect();
            order.shuffle(&mut master_rng);
            for chunk in order.chunks(cfg.minibatch_trajs) {
                let mb_trajs: Vec<&Trajectory> = chunk.iter().map(|&i| &trajs[i]).collect();
                let mb_advs: Vec<&AdvantageRecord> =
                    chunk.iter().map(|&i| &advantages[i]).collect();
                let cur = policy.snapshot();
                let (loss, grad) = ppo_policy_loss(
                    env,
                    &cur,
                    reference,
                    &mb_trajs,
                    &mb_advs,
                    cfg.clip_eps,
                    cfg.kl_beta,
                )?;
                if !loss.is_finite() || !grad.is_finite() {
                    return Err(Error::Diverged(format!(
                        "policy loss non-finite at iteration {iter}"
                    )));
                }
                opt_policy.step_policy(&mut policy, &grad);
                gradient_steps += 1;
                policy_losses.push(loss);

                if let (Some(vn), Some(old_vn), Some(tg)) =
                    (valnet.as_mut(), old_valnet.as_ref(), targets.as_ref())
                {
                    let mb_targets: Vec<Vec<ValueTarget>> =
                        chunk.iter().map(|&i| tg[i].clone()).collect();
                    let (vloss, vgrad) =
                        value_net_loss(vn, old_vn, &mb_targets, cfg.value_clip)?;
                    if !vloss.is_finite() {
                        return Err(Error::Diverged(format!(
                            "value loss non-finite at iteration {iter}"
                        )));
                    }
                    opt_value
                        .as_mut()
                        .expect("critic optimizer present")
                        .step_flat(vn, &vgrad);
                    value_losses.push(vloss);
                }
            }
        }

        // -- evaluate -----------------------------------------------------------
        let snap = policy.snapshot();
        let eval_seed = |tag: u64| crate::rng::stream(seed, &[0xe7a1, iter, tag]).gen::<u64>();
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

        let batch_states: Vec<crate::env::TokenMdpState> = trajs
            .iter()
            .flat_map(|t| {
                let mut s = t.states(env);
                s.truncate(t.len()); // non-terminal states only
                s
            })
            .collect();
        let exact_kl = mean_exact_kl(&snap, reference, &batch_states);

        let improved_best = val_acc > best_val_acc;
        if improved_best {
            best_val_acc = val_acc;
            best_iteration = Some(iter);
            best_policy = Some(snap.clone());
        }

        let metrics = IterationMetrics {
            iteration: iter,
            gradient_steps,
            rollout_tokens,
            train_acc,
            test_acc,
            val_acc,
            train_acc_greedy,
            test_acc_greedy,
            exact_kl,
            policy_loss: policy_losses.iter().sum::<f64>() / policy_losses.len() as f64,
            value_loss: if value_losses.is_empty() {
                None
            } else {
                Some(value_losses.iter().sum::<f64>() / value_losses.len() as f64)
            },
        };

        let state = RunState {
            version: CHECKPOINT_VERSION,
            completed_iterations: iter + 1,
            gradient_steps,
            rollout_tokens,
            policy: PolicyCheckpoint::new(&policy, &master_rng),
            valnet: valnet.clone(),
            opt_policy: opt_policy.clone(),
            opt_value: opt_value.clone(),
            best_val_acc,
            best_iteration,
        };
        let wall_ms = t0.elapsed().as_millis() as u64;
        observer(RunEvent::Iteration {
            metrics: &metrics,
            wall_ms,
            state: &state,
            improved_best,
        })?;
        all_metrics.push(metrics);

        // -- audit the value predictor -----------------------------------------
        if cfg.audit_every > 0 && iter % cfg.audit_every == 0 {
            let audited = &trajs[..cfg.audit_trajectories.min(trajs.len())];
            let segs: Vec<StepSegmentation> = audited
                .iter()
                .map(|t| segment_steps(t, &env.vocab))
                .collect();
            let estimator: Box<dyn ValueEstimator> = match source {
                ValueSource::ValueNet => Box::new(NetEstimator {
                    net: valnet.as_ref().expect("critic present"),
                }),
                ValueSource::McRollouts => Box::new(McEstimator {
                    k: cfg.mc_k,
                    temperature: cfg.mc_temperature(),
                }),
            };
            let audit_seed = crate::rng::stream(seed, &[0xa0d1, iter]).gen::<u64>();
            let values = audit_value_predictions(
                env,
                &snap,
                estimator.as_ref(),
                audited,
                &segs,
                cfg.temperature,
                cfg.leaf_budget,
                iter,
                audit_seed,
            )?;

            let mut trial_sites: Vec<(usize, usize)> = Vec::new();
            let mut level = 0usize;
            while trial_sites.len() < cfg.audit_trials && level < 64 {
                let before = trial_sites.len();
                for (ti, seg) in segs.iter().enumerate() {
                    if trial_sites.len() >= cfg.audit_trials {
                        break;
                    }
                    if level < seg.num_steps() {
                        trial_sites.push((ti, level));
                    }
                }
                if trial_sites.len() == before {
                    break;
                }
                level += 1;
            }
            let trials: Vec<TopActionRecord> = trial_sites
                .into_par_iter()
                .enumerate()
                .map(|(i, (ti, step))| {
                    let traj = &audited[ti];
                    let b = segs[ti].ranges[step].start;
                    let state = traj.states(env)[b].clone();
                    let trial_seed =
                        crate::rng::stream(seed, &[0x7a1a, iter, i as u64]).gen::<u64>();
                    top_action_trial(
                        env,
                        &snap,
                        estimator.as_ref(),
                        &traj.task,
                        &state,
                        cfg.temperature,
                        cfg.leaf_budget,
                        iter,
                        trial_seed,
                    )
                })
                .collect::<Result<_>>()?;

            let dumps: Vec<AdvantageDump> = match &iteration_advs {
                IterationAdvantages::Mc(mc) => mc
                    .iter()
                    .take(audited.len())
                    .enumerate()
                    .map(|(ti, m)| AdvantageDump {
                        trajectory: ti,
                        ranges: m.segmentation.ranges.clone(),
                        boundary_values: m.boundary_values.clone(),
                        per_token: m.record.per_token.clone(),
                        method: m.record.method,
                    })
                    .collect(),
                IterationAdvantages::Gae(recs) => {
                    let vn = valnet.as_ref().expect("critic present");
                    audited
                        .iter()
                        .enumerate()
                        .map(|(ti, traj)| {
                            let states = traj.states(env);
                            let boundary_values = segs[ti]
                                .boundaries()
                                .map(|b| vn.predict(&states[b]))
                                .collect();
                            AdvantageDump {
                                trajectory: ti,
                                ranges: segs[ti].ranges.clone(),
                                boundary_values,
                                per_token: recs[ti].per_token.clone(),
                                method: recs[ti].method,
                            }
                        })
                        .collect()
                }
            };

            observer(RunEvent::Audit {
                iteration: iter,
                values: &values,
                trials: &trials,
                advantages: &dumps,
            })?;
            all_value_audits.extend(values);
            all_trials.extend(trials);
        }
    }

    Ok(PpoOutcome {
        metrics: all_metrics,
        value_audits: all_value_audits,
        top_action_audits: all_trials,
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
    use crate::advantage::AdvantageMethod;
    use crate::env::{generate_tasks, task_from_digits, Difficulty, TaskInstance, Vocab};
    use crate::policy::{Arch, PolicyConfig, PolicyParams};

    fn tiny() -> (Env, TaskInstance, Vocab) {
        let vocab = Vocab::new(2).unwrap();
        let diff = Difficulty { n: 2, base: 2 };
        let env = Env::for_difficulty(&diff).unwrap();
        let task = task_from_digits(&[1, 0], &diff, &vocab);
        (env, task, vocab)
    }

    fn tabular_policy(vocab: Vocab, seed: u64) -> Policy {
        let config = PolicyConfig {
            arch: Arch::Tabular,
            window: 6,
            d_emb: 0,
            d_hidden: 0,
        };
        let mut policy = Policy::new(vocab, config, 0).unwrap();
        // random-ish logits over a handful of contexts to break uniformity
        let mut rng = crate::rng::stream(seed, &[0x7ab]);
        if let PolicyParams::Tabular(t) = policy.params_mut() {
            for a in 0..4u32 {
                for b in 0..4u32 {
                    let ctx = vec![vocab.pad(), vocab.pad(), vocab.pad(), vocab.pad(), a, b];
                    let row: Vec<f64> = (0..4).map(|_| rng.gen_range(-0.5..0.5)).collect();
                    *t.row_mut(&ctx) = row;
                }
            }
        }
        policy
    }

    fn sample_batch(
        env: &Env,
        policy: &PolicySnapshot,
        task: &TaskInstance,
        n: usize,
        seed: u64,
    ) -> Vec<Trajectory> {
        (0..n)
            .map(|i| {
                let mut rng = crate::rng::stream(seed, &[i as u64]);
                rollout::sample_trajectory(env, policy, task, 1.0, &mut rng).unwrap()
            })
            .collect()
    }

    fn fake_advantages(trajs: &[Trajectory], seed: u64) -> Vec<AdvantageRecord> {
        let mut rng = crate::rng::stream(seed, &[0xadd]);
        trajs
            .iter()
            .map(|t| AdvantageRecord {
                per_token: (0..t.len()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                method: AdvantageMethod::Mc { k: 1 },
            })
            .collect()
    }

    #[test]
    fn at_theta_k_with_zero_beta_loss_gradient_is_vanilla_policy_gradient() {
        let (env, task, vocab) = tiny();
        let policy = tabular_policy(vocab, 3).snapshot();
        let trajs = sample_batch(&env, &policy, &task, 4, 17);
        let advs = fake_advantages(&trajs, 5);
        let traj_refs: Vec<&Trajectory> = trajs.iter().collect();
        let adv_refs: Vec<&AdvantageRecord> = advs.iter().collect();
        let (_, grad) =
            ppo_policy_loss(&env, &policy, &policy, &traj_refs, &adv_refs, 0.2, 0.0).unwrap();

        // Eq-style estimate: -1/N sum_traj sum_t grad log pi * A
        let mut expect = policy.zero_grad();
        let w = -1.0 / trajs.len() as f64;
        for (traj, adv) in trajs.iter().zip(&advs) {
            let states = traj.states(&env);
            for t in 0..traj.len() {
                policy.accumulate_grad_log_prob(
                    &states[t],
                    traj.actions[t],
                    w * adv.per_token[t],
                    &mut expect,
                );
            }
        }
        let diff = grad.max_abs_diff(&expect);
        assert!(
            diff < 1e-12,
            "ratio=1 clip-inactive gradient must reduce to the score-function form (diff {diff})"
        );

        // and a huge clip width changes nothing (one-epoch equivalence)
        let (_, grad_wide) =
            ppo_policy_loss(&env, &policy, &policy, &traj_refs, &adv_refs, 1e9, 0.0).unwrap();
        assert!(grad.max_abs_diff(&grad_wide) == 0.0);
    }

    #[test]
    fn saturated_clip_contributes_zero_gradient() {
        let (env, task, vocab) = tiny();
        let policy = tabular_policy(vocab, 4).snapshot();
        let mut traj = sample_batch(&env, &policy, &task, 1, 23).remove(0);
        // Fake behavior log-probs so every ratio is 1 + 2 eps > 1 + eps,
        // with positive advantages: min picks the saturated clipped branch.
        let eps: f64 = 0.2;
        let states = traj.states(&env);
        for t in 0..traj.len() {
            let lp = policy.log_prob(&states[t], traj.actions[t]);
            traj.logprobs[t] = lp - (1.0 + 2.0 * eps).ln();
        }
        let advs = vec![AdvantageRecord {
            per_token: vec![1.0; traj.len()],
            method: AdvantageMethod::Mc { k: 1 },
        }];
        let (_, grad) = ppo_policy_loss(
            &env,
            &policy,
            &policy,
            &[&traj],
            &[advs[0].clone()].iter().collect::<Vec<_>>(),
            eps,
            0.0,
        )
        .unwrap();
        assert_eq!(grad.l2_norm(), 0.0, "saturated clip must kill the gradient");
    }

    #[test]
    fn ppo_loss_gradient_matches_finite_differences() {
        let (env, task, vocab) = tiny();
        let mut policy = tabular_policy(vocab, 6);
        let behavior = policy.snapshot();
        let trajs = sample_batch(&env, &behavior, &task, 3, 31);
        // materialize every visited context so the flat view covers them
        for traj in &trajs {
            for state in traj.states(&env) {
                policy.materialize_state(&state);
            }
        }
        // move the live policy off the behavior snapshot to activate ratios
        let mut perturb_rng = crate::rng::stream(8, &[]);
        let n = policy.params().n_params();
        for i in 0..n {
            let v = policy.params().flat_get(i);
            policy
                .params_mut()
                .flat_set(i, v + perturb_rng.gen_range(-0.05..0.05));
        }
        let reference = tabular_policy(vocab, 99).snapshot();
        let advs = fake_advantages(&trajs, 7);

        let snap = policy.snapshot();
        let traj_refs: Vec<&Trajectory> = trajs.iter().collect();
        let adv_refs: Vec<&AdvantageRecord> = advs.iter().collect();
        let (_, grad) = ppo_policy_loss(
            &env,
            &snap,
            &reference,
            &traj_refs,
            &adv_refs,
            0.2,
            0.05,
        )
        .unwrap();
        let analytic = grad.flatten(snap.params());
        let coords: Vec<usize> = (0..policy.params().n_params()).collect();
        let mut f = |p: &Policy| {
            let s = p.snapshot();
            let traj_refs: Vec<&Trajectory> = trajs.iter().collect();
            let adv_refs: Vec<&AdvantageRecord> = advs.iter().collect();
            ppo_policy_loss(&env, &s, &reference, &traj_refs, &adv_refs, 0.2, 0.05)
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
    fn mismatched_advantage_lengths_are_rejected() {
        let (env, task, vocab) = tiny();
        let policy = tabular_policy(vocab, 6).snapshot();
        let trajs = sample_batch(&env, &policy, &task, 1, 31);
        let bad = AdvantageRecord {
            per_token: vec![0.0; trajs[0].len() + 1],
            method: AdvantageMethod::Mc { k: 1 },
        };
        assert!(matches!(
            ppo_policy_loss(&env, &policy, &policy, &[&trajs[0]], &[&bad], 0.2, 0.0),
            Err(Error::Contract(_))
        ));
    }

    fn smoke_cfg() -> PpoConfig {
        PpoConfig {
            iterations: 3,
            batch_prompts: 2,
            samples_per_prompt: 2,
            minibatch_trajs: 2,
            epochs_per_iter: 1,
            eval_rounds: 2,
            eval_subset: 4,
            audit_every: 2,
            audit_trajectories: 2,
            audit_trials: 2,
            temperature: 1.0,
            ..PpoConfig::default()
        }
    }

    fn tiny_tasks(vocab: &Vocab) -> TaskSets {
        let diff = Difficulty { n: 2, base: 2 };
        TaskSets {
            train: generate_tasks(1, 8, &diff, vocab).unwrap(),
            val: generate_tasks(2, 4, &diff, vocab).unwrap(),
            test: generate_tasks(3, 4, &diff, vocab).unwrap(),
        }
    }

    fn mlp_reference(vocab: Vocab) -> PolicySnapshot {
        Policy::new(
            vocab,
            PolicyConfig {
                arch: Arch::Mlp,
                window: 6,
                d_emb: 4,
                d_hidden: 8,
            },
            42,
        )
        .unwrap()
        .snapshot()
    }

    #[test]
    fn run_ppo_is_deterministic_for_both_sources() {
        let (env, _, vocab) = tiny();
        let tasks = tiny_tasks(&vocab);
        let reference = mlp_reference(vocab);
        for source in [ValueSource::McRollouts, ValueSource::ValueNet] {
            let run = |seed| {
                run_ppo(
                    &env,
                    &tasks,
                    &reference,
                    &smoke_cfg(),
                    source,
                    seed,
                    None,
                    &mut |_| Ok(()),
                )
                .unwrap()
            };
            let a = run(5);
            let b = run(5);
            assert_eq!(
                serde_json::to_string(&a.metrics).unwrap(),
                serde_json::to_string(&b.metrics).unwrap(),
                "same seed must reproduce metrics bit-for-bit"
            );
            assert_eq!(
                a.final_policy.params().content_hash(),
                b.final_policy.params().content_hash()
            );
            assert!(!a.value_audits.is_empty(), "audits expected");
            assert!(!a.top_action_audits.is_empty());
        }
    }

    #[test]
    fn resumed_run_matches_uninterrupted_run() {
        let (env, _, vocab) = tiny();
        let tasks = tiny_tasks(&vocab);
        let reference = mlp_reference(vocab);
        let cfg = smoke_cfg();

        let full = run_ppo(
            &env,
            &tasks,
            &reference,
            &cfg,
            ValueSource::ValueNet,
            9,
            None,
            &mut |_| Ok(()),
        )
        .unwrap();

        // run the first two iterations, capturing the run state
        let mut captured: Option<RunState> = None;
        let mut short_cfg = cfg.clone();
        short_cfg.iterations = 2;
        let _ = run_ppo(
            &env,
            &tasks,
            &reference,
            &short_cfg,
            ValueSource::ValueNet,
            9,
            None,
            &mut |event| {
                if let RunEvent::Iteration { state, .. } = event {
                    captured = Some(state.clone());
                }
                Ok(())
            },
        )
        .unwrap();

        let resumed = run_ppo(
            &env,
            &tasks,
            &reference,
            &cfg,
            ValueSource::ValueNet,
            9,
            captured,
            &mut |_| Ok(()),
        )
        .unwrap();
        let tail = &full.metrics[2..];
        assert_eq!(
            serde_json::to_string(tail).unwrap(),
            serde_json::to_string(&resumed.metrics).unwrap(),
            "resume must continue the exact trajectory of the uninterrupted run"
        );
        assert_eq!(
            full.final_policy.params().content_hash(),
            resumed.final_policy.params().content_hash()
        );
    }
}
