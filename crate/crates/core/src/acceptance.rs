//! The acceptance suite: one function per release criterion, each returning
//! a pass/fail verdict with measured details. The CLI (`run --suite
//! acceptance`) and the `acceptance` integration-test target both call
//! these.
//!
//! Exact-oracle and property checks (criteria 1-5, 10a/b, 11) run on the
//! tiny 4-token environment where enumeration is cheap. Trend criteria
//! (6-9, 10c) train real runs on the default environment (6 digits mod 10,
//! 3 seeds per method) under a work directory; finished runs are keyed by a
//! config hash and reused, so re-running the suite only repeats the cheap
//! checks.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::Rng;

use crate::advantage::{
    exact_boundary_values, gae_advantages, mc_advantages, segment_steps, step_advantages,
    step_rewards, AdvantageMethod, AdvantageRecord,
};
use crate::analysis::{
    random_guess_top_action_accuracy, top_action_accuracy, value_accuracy, value_mae,
    TopActionRecord, ValueAuditRecord, VALUE_ACCURACY_THRESHOLD,
};
use crate::config::ExperimentConfig;
use crate::env::{task_from_digits, Difficulty, Env, TaskInstance, TokenMdpState, Trajectory, Vocab};
use crate::error::{Error, Result};
use crate::grad_check::{check_coords, random_coords, FlatParams, DEFAULT_EPS};
use crate::metrics::read_jsonl;
use crate::policy::{
    exact_kl, kl_hat, Arch, Grad, Policy, PolicyConfig, PolicyParams, PolicySnapshot,
};
use crate::rollout;
use crate::runner::{self, LoadedRun};
use crate::trainers::{
    dpo_positive_loss, ppo_policy_loss, reinforce_gradient, restem_gradient, PreferencePair,
};
use crate::value::{
    exact_value_stats, mc_value, value_net_loss, value_targets, ValueNet, ValueTarget,
    DEFAULT_LEAF_BUDGET,
};

/// Verdict for one criterion.
#[derive(Debug, Clone)]
pub struct CriterionResult {
    pub id: &'static str,
    pub name: &'static str,
    pub passed: bool,
    pub details: String,
    pub runtime: Duration,
}

impl CriterionResult {
    pub fn line(&self) -> String {
        format!(
            "[{}] {:>4} {} ({:.1}s) — {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.runtime.as_secs_f64(),
            self.details
        )
    }
}

struct Check {
    passed: bool,
    details: Vec<String>,
}

impl Check {
    fn new() -> Self {
        Self {
            passed: true,
            details: Vec::new(),
        }
    }

    fn expect(&mut self, ok: bool, what: impl Into<String>) {
        let what = what.into();
        if !ok {
            self.passed = false;
            self.details.push(format!("FAILED: {what}"));
        } else {
            self.details.push(what);
        }
    }

    fn finish(
        self,
        id: &'static str,
        name: &'static str,
        started: Instant,
        time_limit: Option<Duration>,
    ) -> CriterionResult {
        let runtime = started.elapsed();
        let mut passed = self.passed;
        let mut details = self.details.join("; ");
        if let Some(limit) = time_limit {
            if runtime > limit {
                passed = false;
                details.push_str(&format!(
                    "; FAILED: runtime {:.1}s exceeds {:.0}s limit",
                    runtime.as_secs_f64(),
                    limit.as_secs_f64()
                ));
            }
        }
        CriterionResult {
            id,
            name,
            passed,
            details,
            runtime,
        }
    }
}

fn tiny_env() -> (Env, Vocab, Difficulty) {
    let vocab = Vocab::new(2).unwrap();
    let diff = Difficulty { n: 2, base: 2 };
    (Env::for_difficulty(&diff).unwrap(), vocab, diff)
}

fn tiny_mlp(vocab: Vocab, seed: u64) -> Policy {
    Policy::new(
        vocab,
        PolicyConfig {
            arch: Arch::Mlp,
            window: 8,
            d_emb: 8,
            d_hidden: 16,
        },
        seed,
    )
    .unwrap()
}

/// Tabular policy with every context reachable from the given tasks
/// materialized and filled with seeded logits, so flat parameter views and
/// exact enumeration agree on the coordinate set.
fn tiny_tabular_materialized(
    env: &Env,
    vocab: Vocab,
    tasks: &[TaskInstance],
    seed: u64,
) -> Policy {
    let config = PolicyConfig {
        arch: Arch::Tabular,
        window: 8,
        d_emb: 0,
        d_hidden: 0,
    };
    let mut policy = Policy::new(vocab, config, 0).unwrap();
    let mut rng = crate::rng::stream(seed, &[0x7ab5]);
    for task in tasks {
        let mut stack = vec![TokenMdpState::initial(task)];
        while let Some(state) = stack.pop() {
            let ctx = state.context(8, vocab.pad());
            if let PolicyParams::Tabular(t) = policy.params_mut() {
                if !t.table.contains_key(&ctx) {
                    let row: Vec<f64> =
                        (0..vocab.size()).map(|_| rng.gen_range(-0.5..0.5)).collect();
                    *t.row_mut(&ctx) = row;
                }
            }
            for a in 0..vocab.size() {
                let next = env.transition(&state, a).unwrap();
                if !next.is_terminal() {
                    stack.push(next);
                }
            }
        }
    }
    policy
}

fn all_tiny_tasks(vocab: &Vocab, diff: &Difficulty) -> Vec<TaskInstance> {
    let mut tasks = Vec::new();
    for a in 0..diff.base {
        for b in 0..diff.base {
            tasks.push(task_from_digits(&[a, b], diff, vocab));
        }
    }
    tasks
}

// ---------------------------------------------------------------------------
// 1. gradient correctness
// ---------------------------------------------------------------------------

pub fn criterion_1_gradient_correctness() -> CriterionResult {
    let started = Instant::now();
    let mut check = Check::new();
    let (env, vocab, diff) = tiny_env();
    let task = task_from_digits(&[1, 0], &diff, &vocab);
    let tol = 1e-5;

    // log_prob, both architectures
    for arch_name in ["mlp", "tabular"] {
        let mut policy = match arch_name {
            "mlp" => tiny_mlp(vocab, 11),
            _ => tiny_tabular_materialized(&env, vocab, std::slice::from_ref(&task), 4),
        };
        let state = TokenMdpState::initial(&task);
        let action = 1u32;
        let snap = policy.snapshot();
        let analytic = snap.grad_log_prob(&state, action).flatten(snap.params());
        let mut rng = crate::rng::stream(1001, &[]);
        let coords = random_coords(policy.flat_len(), 64, &mut rng);
        let mut f = |p: &Policy| p.snapshot().log_prob(&state, action);
        let report = check_coords(&mut policy, &mut f, &analytic, &coords, DEFAULT_EPS);
        check.expect(
            report.passes(tol),
            format!(
                "log_prob[{arch_name}] worst rel err {:.2e} over {} coords",
                report.worst_rel_err, report.checked
            ),
        );
    }

    // ppo_policy_loss on both architectures, with KL term active
    for arch_name in ["tabular", "mlp"] {
        let mut policy = match arch_name {
            "mlp" => tiny_mlp(vocab, 21),
            _ => tiny_tabular_materialized(&env, vocab, std::slice::from_ref(&task), 6),
        };
        let behavior = policy.snapshot();
        let mut rng = crate::rng::stream(77, &[]);
        let trajs: Vec<Trajectory> = (0..4)
            .map(|_| rollout::sample_trajectory(&env, &behavior, &task, 1.0, &mut rng).unwrap())
            .collect();
        // decorrelate the live policy from the behavior snapshot
        let n = policy.params().n_params();
        for i in 0..n {
            let v = policy.params().flat_get(i);
            policy.params_mut().flat_set(i, v + rng.gen_range(-0.05..0.05));
        }
        let reference = match arch_name {
            "mlp" => tiny_mlp(vocab, 22).snapshot(),
            _ => tiny_tabular_materialized(&env, vocab, std::slice::from_ref(&task), 7).snapshot(),
        };
        let advs: Vec<AdvantageRecord> = trajs
            .iter()
            .map(|t| AdvantageRecord {
                per_token: (0..t.len()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                method: AdvantageMethod::Mc { k: 1 },
            })
            .collect();
        let snap = policy.snapshot();
        let traj_refs: Vec<&Trajectory> = trajs.iter().collect();
        let adv_refs: Vec<&AdvantageRecord> = advs.iter().collect();
        let (_, grad) =
            ppo_policy_loss(&env, &snap, &reference, &traj_refs, &adv_refs, 0.2, 0.05).unwrap();
        let analytic = grad.flatten(snap.params());
        let coords = random_coords(policy.flat_len(), 64, &mut rng);
        let mut f = |p: &Policy| {
            let traj_refs: Vec<&Trajectory> = trajs.iter().collect();
            let adv_refs: Vec<&AdvantageRecord> = advs.iter().collect();
            ppo_policy_loss(&env, &p.snapshot(), &reference, &traj_refs, &adv_refs, 0.2, 0.05)
                .unwrap()
                .0
        };
        let report = check_coords(&mut policy, &mut f, &analytic, &coords, DEFAULT_EPS);
        check.expect(
            report.passes(tol),
            format!(
                "ppo_policy_loss[{arch_name}] worst rel err {:.2e} over {} coords",
                report.worst_rel_err, report.checked
            ),
        );
    }

    // value_net_loss
    {
        let policy = tiny_mlp(vocab, 31).snapshot();
        let mut net = ValueNet::from_policy(&policy, 1).unwrap();
        let old = ValueNet::from_policy(&policy, 2).unwrap();
        let mut rng = crate::rng::stream(87, &[]);
        let batch: Vec<Vec<ValueTarget>> = (0..3)
            .map(|_| {
                let traj = rollout::sample_trajectory(&env, &policy, &task, 1.0, &mut rng).unwrap();
                value_targets(&env, &traj)
            })
            .collect();
        let (_, analytic) = value_net_loss(&net, &old, &batch, 0.15).unwrap();
        let coords = random_coords(net.n_params(), 64, &mut rng);
        let mut f = |n: &ValueNet| value_net_loss(n, &old, &batch, 0.15).unwrap().0;
        let report = check_coords(&mut net, &mut f, &analytic, &coords, DEFAULT_EPS);
        check.expect(
            report.passes(tol),
            format!(
                "value_net_loss worst rel err {:.2e} over {} coords",
                report.worst_rel_err, report.checked
            ),
        );
    }

    // dpo_positive_loss
    {
        let reference = tiny_mlp(vocab, 41).snapshot();
        let mut policy = tiny_mlp(vocab, 42);
        let good = crate::env::reference_solution(&task, &vocab);
        let mut bad = good.clone();
        let pos = bad.len() - 2;
        bad[pos] = (bad[pos] + 1) % diff.base;
        let to_traj = |actions: &[u32]| {
            let mut state = TokenMdpState::initial(&task);
            let mut rewards = Vec::new();
            for &a in actions {
                let (next, r) = env.step(&state, a, &task).unwrap();
                rewards.push(r);
                state = next;
            }
            Trajectory {
                task: task.clone(),
                actions: actions.to_vec(),
                rewards: rewards.clone(),
                logprobs: vec![0.0; rewards.len()],
                ret: rewards.iter().sum(),
            }
        };
        let pair = PreferencePair {
            task: task.clone(),
            chosen: to_traj(&good),
            rejected: to_traj(&bad),
        };
        let snap = policy.snapshot();
        let (_, grad) =
            dpo_positive_loss(&env, &snap, &reference, &[&pair], 0.4, 2.0).unwrap();
        let analytic = grad.flatten(snap.params());
        let mut rng = crate::rng::stream(91, &[]);
        let coords = random_coords(policy.flat_len(), 64, &mut rng);
        let mut f = |p: &Policy| {
            dpo_positive_loss(&env, &p.snapshot(), &reference, &[&pair], 0.4, 2.0)
                .unwrap()
                .0
        };
        let report = check_coords(&mut policy, &mut f, &analytic, &coords, DEFAULT_EPS);
        check.expect(
            report.passes(tol),
            format!(
                "dpo_positive_loss worst rel err {:.2e} over {} coords",
                report.worst_rel_err, report.checked
            ),
        );
    }

    check.finish(
        "1",
        "gradient correctness vs central finite differences",
        started,
        Some(Duration::from_secs(60)),
    )
}

// ---------------------------------------------------------------------------
// 2. Monte-Carlo value unbiasedness
// ---------------------------------------------------------------------------

pub fn criterion_2_mc_value_unbiasedness() -> CriterionResult {
    let started = Instant::now();
    let mut check = Check::new();
    let (env, vocab, diff) = tiny_env();
    let policy = tiny_mlp(vocab, 5).snapshot();
    let tasks = all_tiny_tasks(&vocab, &diff);

    // 20 distinct states sampled from on-policy prefixes
    let mut states: Vec<(TaskInstance, TokenMdpState)> = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    let mut rng = crate::rng::stream(1234, &[]);
    'outer: for round in 0..200u64 {
        let task = &tasks[(round % tasks.len() as u64) as usize];
        let traj = rollout::sample_trajectory(&env, &policy, task, 1.0, &mut rng).unwrap();
        for state in traj.states(&env) {
            if state.is_terminal() {
                continue;
            }
            let key = (task.prompt.clone(), state.generated().to_vec());
            if seen.insert(key) {
                states.push((task.clone(), state));
                if states.len() == 20 {
                    break 'outer;
                }
            }
        }
    }
    check.expect(states.len() == 20, format!("{} probe states", states.len()));

    let seeds = 200;
    let mut worst: f64 = 0.0;
    let mut all_ok = true;
    for k in [1u32, 3, 9] {
        for (si, (task, state)) in states.iter().enumerate() {
            let exact = exact_value_stats(&env, &policy, task, state, 1.0, DEFAULT_LEAF_BUDGET)
                .unwrap()
                .value;
            let vals: Vec<f64> = (0..seeds)
                .map(|s| {
                    let mut rng =
                        crate::rng::stream(5600 + s as u64, &[k as u64, si as u64]);
                    mc_value(&env, &policy, task, state, k, 1.0, &mut rng)
                        .unwrap()
                        .value
                })
                .collect();
            let mean: f64 = vals.iter().sum::<f64>() / seeds as f64;
            let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / (seeds - 1) as f64;
            let se = (var / seeds as f64).sqrt();
            let dev = (mean - exact).abs();
            let sigmas = if se > 0.0 { dev / se } else if dev == 0.0 { 0.0 } else { f64::INFINITY };
            worst = worst.max(sigmas);
            if dev > 3.0 * se + 1e-12 {
                all_ok = false;
            }
        }
    }
    check.expect(
        all_ok,
        format!("mc_value K in {{1,3,9}} on 20 states x {seeds} seeds, worst deviation {worst:.2} se"),
    );
    check.finish(
        "2",
        "Monte-Carlo value estimates are unbiased",
        started,
        Some(Duration::from_secs(120)),
    )
}

// ---------------------------------------------------------------------------
// 3. policy-gradient unbiasedness
// ---------------------------------------------------------------------------

/// Exact gradient of J(theta) = mean over tasks of E[R] by full trajectory
/// enumeration at temperature 1 on the tabular policy.
fn enumerate_grad_j(
    env: &Env,
    policy: &PolicySnapshot,
    tasks: &[TaskInstance],
) -> Grad {
    fn recurse(
        env: &Env,
        policy: &PolicySnapshot,
        task: &TaskInstance,
        state: &TokenMdpState,
        path_prob: f64,
        score: &mut Vec<(TokenMdpState, u32)>,
        grad: &mut Grad,
        task_weight: f64,
    ) {
        let probs: Vec<f64> = policy.log_probs(state).iter().map(|l| l.exp()).collect();
        for a in 0..probs.len() as u32 {
            let p = probs[a as usize];
            let reward = env.reward(state, a, task);
            let next = env.transition(state, a).unwrap();
            score.push((state.clone(), a));
            let leaf_prob = path_prob * p;
            if reward > 0.0 {
                // R = 1 leaf: add P(tau) * R * sum_t grad log pi
                for (s, act) in score.iter() {
                    policy.accumulate_grad_log_prob(s, *act, task_weight * leaf_prob, grad);
                }
            }
            if !next.is_terminal() {
                recurse(env, policy, task, &next, leaf_prob, score, grad, task_weight);
            }
            score.pop();
        }
    }

    let mut grad = policy.zero_grad();
    let w = 1.0 / tasks.len() as f64;
    for task in tasks {
        let mut score = Vec::new();
        recurse(
            env,
            policy,
            task,
            &TokenMdpState::initial(task),
            1.0,
            &mut score,
            &mut grad,
            w,
        );
    }
    grad
}

pub fn criterion_3_policy_gradient_unbiasedness() -> CriterionResult {
    let started = Instant::now();
    let mut check = Check::new();
    let (env, vocab, diff) = tiny_env();
    let tasks = all_tiny_tasks(&vocab, &diff);
    let policy = tiny_tabular_materialized(&env, vocab, &tasks, 2024);
    let snap = policy.snapshot();

    let exact = enumerate_grad_j(&env, &snap, &tasks).flatten(snap.params());

    // Seed-averaged first-iteration gradient estimate: K=1, beta=0, raw
    // (unnormalized) Monte-Carlo step advantages, ratios identically 1.
    let n_seeds = 600usize;
    let samples_per_task = 2usize;
    let n_coords = snap.params().n_params();
    let mut sum = vec![0.0; n_coords];
    let mut sumsq = vec![0.0; n_coords];
    use rayon::prelude::*;
    let per_seed: Vec<Vec<f64>> = (0..n_seeds)
        .into_par_iter()
        .map(|s| {
            let mut trajs = Vec::new();
            for (ti, task) in tasks.iter().enumerate() {
                for rep in 0..samples_per_task {
                    let mut rng = crate::rng::stream(
                        31_000 + s as u64,
                        &[ti as u64, rep as u64],
                    );
                    trajs.push(
                        rollout::sample_trajectory(&env, &snap, task, 1.0, &mut rng).unwrap(),
                    );
                }
            }
            let advs: Vec<AdvantageRecord> = trajs
                .iter()
                .enumerate()
                .map(|(ti, traj)| {
                    let seg = segment_steps(traj, &vocab);
                    let mc_seed = crate::rng::stream(77_000 + s as u64, &[ti as u64])
                        .gen::<u64>();
                    mc_advantages(&env, &snap, traj, &seg, 1, 1.0, mc_seed)
                        .unwrap()
                        .record
                })
                .collect();
            let traj_refs: Vec<&Trajectory> = trajs.iter().collect();
            let adv_refs: Vec<&AdvantageRecord> = advs.iter().collect();
            let (_, grad) =
                ppo_policy_loss(&env, &snap, &snap, &traj_refs, &adv_refs, 0.2, 0.0).unwrap();
            // the loss is the negated objective: flip back to ascent
            let mut est = grad.flatten(snap.params());
            est.iter_mut().for_each(|g| *g = -*g);
            est
        })
        .collect();
    for est in &per_seed {
        for (i, g) in est.iter().enumerate() {
            sum[i] += g;
            sumsq[i] += g * g;
        }
    }

    let mut worst_sigmas: f64 = 0.0;
    let mut violations = 0usize;
    for i in 0..n_coords {
        let mean = sum[i] / n_seeds as f64;
        let var = (sumsq[i] / n_seeds as f64 - mean * mean).max(0.0) * n_seeds as f64
            / (n_seeds - 1) as f64;
        let se = (var / n_seeds as f64).sqrt();
        let dev = (mean - exact[i]).abs();
        if dev > 3.0 * se + 1e-12 {
            violations += 1;
        }
        if se > 0.0 {
            worst_sigmas = worst_sigmas.max(dev / se);
        }
    }
    check.expect(
        violations == 0,
        format!(
            "{n_coords} coordinates x {n_seeds} seeds, worst deviation {worst_sigmas:.2} se, {violations} violations"
        ),
    );
    check.finish(
        "3",
        "Monte-Carlo policy gradient is unbiased vs enumerated grad J",
        started,
        Some(Duration::from_secs(300)),
    )
}

// ---------------------------------------------------------------------------
// 4. GAE identities
// ---------------------------------------------------------------------------

pub fn criterion_4_gae_identities() -> CriterionResult {
    let started = Instant::now();
    let mut check = Check::new();
    let (env, vocab, diff) = tiny_env();
    let task = task_from_digits(&[1, 1], &diff, &vocab);
    let policy = tiny_mlp(vocab, 3).snapshot();
    let valnet = ValueNet::from_policy(&policy, 9).unwrap();
    let mut rng = crate::rng::stream(404, &[]);

    let mut lambda1_exact = true;
    let mut lambda0_exact = true;
    let mut telescoping_ok = true;
    let mut worst_tel: f64 = 0.0;
    for _ in 0..50 {
        let traj = rollout::sample_trajectory(&env, &policy, &task, 1.0, &mut rng).unwrap();
        let states = traj.states(&env);

        let rec1 = gae_advantages(&valnet, &env, &traj, 1.0, 1.0).unwrap();
        let mut suffix = 0.0;
        for t in (0..traj.len()).rev() {
            suffix += traj.rewards[t];
            if rec1.per_token[t] != suffix - valnet.predict(&states[t]) {
                lambda1_exact = false;
            }
        }

        let rec0 = gae_advantages(&valnet, &env, &traj, 0.0, 1.0).unwrap();
        for t in 0..traj.len() {
            let v_next = if t + 1 < traj.len() {
                valnet.predict(&states[t + 1])
            } else {
                0.0
            };
            let delta = traj.rewards[t] + v_next - valnet.predict(&states[t]);
            if rec0.per_token[t] != delta {
                lambda0_exact = false;
            }
        }

        let seg = segment_steps(&traj, &vocab);
        let boundary =
            exact_boundary_values(&env, &policy, &task, &traj, &seg, 1.0, DEFAULT_LEAF_BUDGET)
                .unwrap();
        let advs = step_advantages(&step_rewards(&traj, &seg), &boundary);
        let err = (advs.iter().sum::<f64>() - (traj.ret - boundary[0])).abs();
        worst_tel = worst_tel.max(err);
        if err > 1e-9 {
            telescoping_ok = false;
        }
    }
    check.expect(lambda1_exact, "lambda=1, gamma=1 equals G_t - V(s_t) exactly");
    check.expect(lambda0_exact, "lambda=0 equals the one-step TD error exactly");
    check.expect(
        telescoping_ok,
        format!("exact-value step advantages telescope to R - V(s0), worst err {worst_tel:.2e}"),
    );
    check.finish("4", "GAE identities", started, None)
}

// ---------------------------------------------------------------------------
// 5. KL estimator
// ---------------------------------------------------------------------------

pub fn criterion_5_kl_estimator() -> CriterionResult {
    let started = Instant::now();
    let mut check = Check::new();
    let (env, vocab, diff) = tiny_env();
    let tasks = all_tiny_tasks(&vocab, &diff);
    let policy = tiny_mlp(vocab, 51).snapshot();
    let reference = tiny_mlp(vocab, 52).snapshot();

    // nonnegativity over 1e6 sampled (s, a)
    let mut rng = crate::rng::stream(5050, &[]);
    let mut negatives = 0u64;
    let mut drawn = 0u64;
    'outer: loop {
        for task in &tasks {
            let traj = rollout::sample_trajectory(&env, &policy, task, 1.0, &mut rng).unwrap();
            let states = traj.states(&env);
            for t in 0..traj.len() {
                // resample several actions at this state
                for _ in 0..40 {
                    let a = policy.sample_action(&states[t], 1.0, &mut rng).unwrap();
                    if kl_hat(&policy, &reference, &states[t], a) < 0.0 {
                        negatives += 1;
                    }
                    drawn += 1;
                    if drawn >= 1_000_000 {
                        break 'outer;
                    }
                }
            }
        }
    }
    check.expect(
        negatives == 0,
        format!("kl_hat >= 0 on {drawn} sampled (s, a); {negatives} negatives"),
    );

    // expectation matches the exact vocabulary-summed KL within 3 sigma
    let mut all_ok = true;
    let mut worst: f64 = 0.0;
    for (si, task) in tasks.iter().enumerate() {
        let state = TokenMdpState::initial(task);
        let exact = exact_kl(&policy, &reference, &state);
        let n = 100_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        let mut r = crate::rng::stream(6060, &[si as u64]);
        for _ in 0..n {
            let a = policy.sample_action(&state, 1.0, &mut r).unwrap();
            let k = kl_hat(&policy, &reference, &state, a);
            sum += k;
            sumsq += k * k;
        }
        let mean = sum / n as f64;
        let var = (sumsq / n as f64 - mean * mean).max(0.0);
        let se = (var / n as f64).sqrt();
        let sigmas = (mean - exact).abs() / se.max(1e-300);
        worst = worst.max(sigmas);
        if (mean - exact).abs() > 3.0 * se {
            all_ok = false;
        }
    }
    check.expect(
        all_ok,
        format!("E[kl_hat] matches exact KL on {} states, worst {worst:.2} sigma", tasks.len()),
    );
    check.finish("5", "per-sample KL estimator", started, None)
}

// ---------------------------------------------------------------------------
// trend criteria: shared default-environment runs
// ---------------------------------------------------------------------------

/// Target the trend runs must reach: the frozen SFT baseline plus 20
/// points (see `config::DEFAULT_ENV_TARGET_ACCURACY`).
pub fn trend_target() -> f64 {
    crate::config::DEFAULT_ENV_TARGET_ACCURACY
}

fn config_hash(cfg: &ExperimentConfig) -> u64 {
    crate::rng::fnv1a_tokens(cfg.to_toml_string().bytes().map(|b| b as u32))
}

/// Runs (or reuses) every seed of a preset under the work dir; directories
/// are keyed by a hash of the resolved config so stale fixtures are never
/// picked up.
pub fn ensure_runs(work_dir: &Path, preset: &str) -> Result<PathBuf> {
    let cfg = ExperimentConfig::preset(preset)
        .ok_or_else(|| Error::Config(format!("unknown preset {preset}")))?;
    let dir = work_dir.join(format!("{preset}-{:08x}", config_hash(&cfg) as u32));
    for &seed in &cfg.run.seeds {
        let seed_dir = runner::seed_dir(&dir, seed);
        if seed_dir.join("summary.json").exists() {
            continue;
        }
        runner::execute(&cfg, &dir, Some(seed), false)?;
    }
    Ok(dir)
}

fn load_group(dir: &Path) -> Result<Vec<LoadedRun>> {
    runner::load_runs(dir)
}

fn final_accs(runs: &[LoadedRun]) -> Vec<f64> {
    runs.iter()
        .filter_map(|r| r.metrics.last().map(|m| m.test_acc))
        .collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

// 6. credit assignment wins
pub fn criterion_6_credit_assignment(work_dir: &Path) -> Result<CriterionResult> {
    let started = Instant::now();
    let mut check = Check::new();
    let vine_dir = ensure_runs(work_dir, "vineppo_default")?;
    let ppo_dir = ensure_runs(work_dir, "ppo_default")?;
    let vine = load_group(&vine_dir)?;
    let ppo = load_group(&ppo_dir)?;
    let target = trend_target();

    let mut wins = 0usize;
    let mut lines = Vec::new();
    for (v, p) in vine.iter().zip(&ppo) {
        let sv = runner::steps_to_target(&v.metrics, target);
        let sp = runner::steps_to_target(&p.metrics, target);
        let win = match (sv, sp) {
            (Some(a), Some(b)) => a < b,
            (Some(_), None) => true,
            _ => false,
        };
        if win {
            wins += 1;
        }
        lines.push(format!(
            "seed {}: mc {:?} vs critic {:?} steps",
            v.manifest.seed, sv, sp
        ));
    }
    check.expect(
        wins >= 2,
        format!(
            "mc advantages reach acc {target} first in {wins}/3 seeds ({})",
            lines.join(", ")
        ),
    );

    let vf = final_accs(&vine);
    let pf = final_accs(&ppo);
    check.expect(
        mean(&vf) >= mean(&pf),
        format!("final acc mean {:.4} (mc) vs {:.4} (critic)", mean(&vf), mean(&pf)),
    );

    // wall-clock sanity: each run stayed under the 30-minute budget
    let mut max_wall_ms: u64 = 0;
    for run in vine.iter().chain(&ppo) {
        let timings: Vec<crate::metrics::TimingRecord> =
            read_jsonl(&run.dir.join("timings.jsonl")).unwrap_or_default();
        let total: u64 = timings.iter().map(|t| t.wall_ms).sum();
        max_wall_ms = max_wall_ms.max(total);
    }
    check.expect(
        max_wall_ms < 30 * 60 * 1000,
        format!("slowest run took {:.1}s", max_wall_ms as f64 / 1000.0),
    );
    Ok(check.finish(
        "6",
        "credit assignment wins on the default env",
        started,
        None,
    ))
}

// 7. K ablation
pub fn criterion_7_k_ablation(work_dir: &Path) -> Result<CriterionResult> {
    let started = Instant::now();
    let mut check = Check::new();
    let k9 = final_accs(&load_group(&ensure_runs(work_dir, "vineppo_default")?)?);
    let k3 = final_accs(&load_group(&ensure_runs(work_dir, "vineppo_k3")?)?);
    let k1 = final_accs(&load_group(&ensure_runs(work_dir, "vineppo_k1")?)?);
    let (m9, m3, m1) = (mean(&k9), mean(&k3), mean(&k1));
    let gap_hi = m9 - m3;
    let gap_lo = m3 - m1;
    let slack_hi = std_dev(&k9).max(std_dev(&k3));
    let slack_lo = std_dev(&k3).max(std_dev(&k1));
    check.expect(
        gap_hi >= -slack_hi,
        format!("K=9 mean {m9:.4} vs K=3 mean {m3:.4} (allowing 1 std = {slack_hi:.4})"),
    );
    check.expect(
        gap_lo >= -slack_lo,
        format!("K=3 mean {m3:.4} vs K=1 mean {m1:.4} (allowing 1 std = {slack_lo:.4})"),
    );
    Ok(check.finish("7", "more rollouts per boundary help", started, None))
}

// 8. KL efficiency
pub fn criterion_8_kl_efficiency(work_dir: &Path) -> Result<CriterionResult> {
    let started = Instant::now();
    let mut check = Check::new();
    let vine = load_group(&ensure_runs(work_dir, "vineppo_default")?)?;
    let ppo = load_group(&ensure_runs(work_dir, "ppo_default")?)?;
    let vine_curve = runner::mean_kl_curve(&vine);
    let ppo_curve = runner::mean_kl_curve(&ppo);
    let grid = crate::analysis::shared_kl_grid(&vine_curve, &ppo_curve, 25);
    let mut ok = 0usize;
    let mut total = 0usize;
    for g in &grid {
        let (Some(v), Some(p)) = (
            crate::analysis::interp_accuracy(&vine_curve, *g),
            crate::analysis::interp_accuracy(&ppo_curve, *g),
        ) else {
            continue;
        };
        total += 1;
        if v >= p - 0.01 {
            ok += 1;
        }
    }
    check.expect(total >= 2, format!("{total} comparable KL grid points"));
    check.expect(
        (ok as f64) >= 0.8 * total as f64,
        format!("mc accuracy >= critic accuracy - 0.01 at {ok}/{total} grid points"),
    );
    Ok(check.finish("8", "better accuracy per unit of KL", started, None))
}

// 9. value-prediction analysis
pub fn criterion_9_value_analysis(work_dir: &Path) -> Result<CriterionResult> {
    let started = Instant::now();
    let mut check = Check::new();
    let vine = load_group(&ensure_runs(work_dir, "vineppo_default")?)?;
    let ppo = load_group(&ensure_runs(work_dir, "ppo_default")?)?;

    let load_values = |runs: &[LoadedRun]| -> Vec<ValueAuditRecord> {
        runs.iter()
            .flat_map(|r| {
                read_jsonl::<ValueAuditRecord>(&r.dir.join("value_audit.jsonl"))
                    .unwrap_or_default()
            })
            .collect()
    };
    let load_trials = |runs: &[LoadedRun]| -> Vec<TopActionRecord> {
        runs.iter()
            .flat_map(|r| {
                read_jsonl::<TopActionRecord>(&r.dir.join("topaction_audit.jsonl"))
                    .unwrap_or_default()
            })
            .collect()
    };
    let vine_values = load_values(&vine);
    let ppo_values = load_values(&ppo);
    let vine_trials = load_trials(&vine);
    let ppo_trials = load_trials(&ppo);

    // match on common audited iterations
    let iters: std::collections::BTreeSet<u64> = vine_values
        .iter()
        .map(|r| r.iteration)
        .filter(|i| ppo_values.iter().any(|r| r.iteration == *i))
        .collect();
    let keep = |recs: &[ValueAuditRecord]| -> Vec<ValueAuditRecord> {
        recs.iter()
            .filter(|r| iters.contains(&r.iteration))
            .cloned()
            .collect()
    };
    let vine_matched = keep(&vine_values);
    let ppo_matched = keep(&ppo_values);
    check.expect(
        !vine_matched.is_empty() && !ppo_matched.is_empty(),
        format!("{} matched audited iterations", iters.len()),
    );

    let vine_mae = value_mae(&vine_matched)?;
    let ppo_mae = value_mae(&ppo_matched)?;
    check.expect(
        vine_mae < ppo_mae,
        format!("value MAE {vine_mae:.4} (mc) vs {ppo_mae:.4} (critic)"),
    );
    let vine_acc = value_accuracy(&vine_matched, VALUE_ACCURACY_THRESHOLD)?;
    let ppo_acc = value_accuracy(&ppo_matched, VALUE_ACCURACY_THRESHOLD)?;
    check.expect(
        vine_acc > ppo_acc,
        format!("0.05-threshold accuracy {vine_acc:.4} (mc) vs {ppo_acc:.4} (critic)"),
    );

    let keep_trials = |recs: &[TopActionRecord]| -> Vec<TopActionRecord> {
        recs.iter()
            .filter(|r| iters.contains(&r.iteration))
            .cloned()
            .collect()
    };
    let vine_t = keep_trials(&vine_trials);
    let ppo_t = keep_trials(&ppo_trials);
    let vine_top = top_action_accuracy(&vine_t)?;
    let ppo_top = top_action_accuracy(&ppo_t)?;
    let sigma = (0.2f64 * 0.8 / vine_t.len() as f64).sqrt();
    check.expect(
        vine_top > 0.2 + 3.0 * sigma,
        format!(
            "mc top-action accuracy {vine_top:.4} vs chance band 0.2 + {:.4} ({} trials)",
            3.0 * sigma,
            vine_t.len()
        ),
    );
    check.expect(
        vine_top > ppo_top,
        format!("top-action accuracy {vine_top:.4} (mc) vs {ppo_top:.4} (critic)"),
    );

    // chance calibration over pooled unique-argmax trials
    let mut pooled = vine_trials.clone();
    pooled.extend(ppo_trials.iter().cloned());
    let (rand_acc, used) = random_guess_top_action_accuracy(&pooled, 777);
    let sigma_rand = (0.2f64 * 0.8 / used.max(1) as f64).sqrt();
    check.expect(
        used >= 1000,
        format!("{used} unique-argmax trials for calibration"),
    );
    check.expect(
        (rand_acc - 0.2).abs() <= 3.0 * sigma_rand,
        format!("shuffled-prediction accuracy {rand_acc:.4} within 0.2 +/- {:.4}", 3.0 * sigma_rand),
    );
    Ok(check.finish("9", "value-prediction quality analysis", started, None))
}

// 10. baseline behavior
pub fn criterion_10_baselines(work_dir: &Path) -> Result<CriterionResult> {
    let started = Instant::now();
    let mut check = Check::new();
    let (env, vocab, diff) = tiny_env();
    let tasks = all_tiny_tasks(&vocab, &diff);

    // (a) rejection-finetuning gradient == REINFORCE gradient
    let policy = tiny_tabular_materialized(&env, vocab, &tasks, 88).snapshot();
    let mut rng = crate::rng::stream(808, &[]);
    let trajs: Vec<Trajectory> = (0..64)
        .map(|i| {
            let task = &tasks[i % tasks.len()];
            rollout::sample_trajectory(&env, &policy, task, 1.0, &mut rng).unwrap()
        })
        .collect();
    let diff_grad = restem_gradient(&env, &policy, &trajs)
        .max_abs_diff(&reinforce_gradient(&env, &policy, &trajs));
    check.expect(
        diff_grad <= 1e-9,
        format!("restem vs reinforce gradient max diff {diff_grad:.2e}"),
    );

    // (b) preference loss at the reference policy
    let task = &tasks[3];
    let good = crate::env::reference_solution(task, &vocab);
    let mut bad = good.clone();
    let pos = bad.len() - 2;
    bad[pos] = (bad[pos] + 1) % diff.base;
    let to_traj = |actions: &[u32]| {
        let mut state = TokenMdpState::initial(task);
        let mut rewards = Vec::new();
        for &a in actions {
            let (next, r) = env.step(&state, a, task).unwrap();
            rewards.push(r);
            state = next;
        }
        Trajectory {
            task: task.clone(),
            actions: actions.to_vec(),
            rewards: rewards.clone(),
            logprobs: vec![0.0; rewards.len()],
            ret: rewards.iter().sum(),
        }
    };
    let pair = PreferencePair {
        task: task.clone(),
        chosen: to_traj(&good),
        rejected: to_traj(&bad),
    };
    let snap = tiny_mlp(vocab, 5).snapshot();
    let (loss, _) = dpo_positive_loss(&env, &snap, &snap, &[&pair], 0.3, 5.0)?;
    let err = (loss - std::f64::consts::LN_2).abs();
    check.expect(
        err <= 1e-12,
        format!("preference loss at the reference = ln 2 (err {err:.2e})"),
    );

    // (c) rejection finetuning overfits harder than mc credit assignment
    let restem = load_group(&ensure_runs(work_dir, "restem_default")?)?;
    let vine = load_group(&ensure_runs(work_dir, "vineppo_default")?)?;
    let gap_at = |runs: &[LoadedRun], level: f64| -> Option<f64> {
        let gaps: Vec<f64> = runs
            .iter()
            .filter_map(|r| {
                r.metrics
                    .iter()
                    .find(|m| m.test_acc >= level)
                    .map(|m| m.train_acc - m.test_acc)
            })
            .collect();
        if gaps.is_empty() {
            None
        } else {
            Some(mean(&gaps))
        }
    };
    let restem_best = restem
        .iter()
        .filter_map(|r| {
            r.metrics
                .iter()
                .map(|m| m.test_acc)
                .fold(None, |acc: Option<f64>, x| Some(acc.map_or(x, |a| a.max(x))))
        })
        .fold(f64::INFINITY, f64::min);
    let vine_best = vine
        .iter()
        .filter_map(|r| {
            r.metrics
                .iter()
                .map(|m| m.test_acc)
                .fold(None, |acc: Option<f64>, x| Some(acc.map_or(x, |a| a.max(x))))
        })
        .fold(f64::INFINITY, f64::min);
    let level = restem_best.min(vine_best) - 1e-9;
    match (gap_at(&restem, level), gap_at(&vine, level)) {
        (Some(g_restem), Some(g_vine)) => {
            check.expect(
                g_restem > g_vine,
                format!(
                    "train-test gap at matched test acc {level:.3}: {g_restem:.4} (rejection ft) vs {g_vine:.4} (mc)"
                ),
            );
        }
        _ => check.expect(false, "no matched accuracy level reached by both methods"),
    }
    Ok(check.finish("10", "baseline behavior", started, None))
}

// 11. determinism and persistence
pub fn criterion_11_determinism(work_dir: &Path) -> Result<CriterionResult> {
    let started = Instant::now();
    let mut check = Check::new();

    let mut cfg = ExperimentConfig::preset("tiny_vineppo").unwrap();
    cfg.run.seeds = vec![1];
    cfg.ppo.iterations = 4;
    cfg.ppo.eval_rounds = 4;
    let dir_a = work_dir.join("det_a");
    let dir_b = work_dir.join("det_b");
    // a dedicated single-threaded pool: the strict determinism contract
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::Config(format!("pool: {e}")))?;
    pool.install(|| -> Result<()> {
        runner::execute(&cfg, &dir_a, None, false)?;
        runner::execute(&cfg, &dir_b, None, false)?;
        Ok(())
    })?;
    let read = |d: &Path| std::fs::read(runner::seed_dir(d, 1).join("metrics.jsonl"));
    let bytes_a = read(&dir_a)?;
    let bytes_b = read(&dir_b)?;
    check.expect(
        bytes_a == bytes_b,
        format!(
            "repeated single-threaded runs byte-identical ({} bytes of metrics)",
            bytes_a.len()
        ),
    );

    // checkpoint round trip is bit-exact
    let ckpt_path = runner::seed_dir(&dir_a, 1).join("checkpoints/final.ckpt");
    let ckpt = crate::checkpoint::load_policy(&ckpt_path)?;
    let tmp = work_dir.join("roundtrip.ckpt");
    crate::checkpoint::save_policy(&tmp, &ckpt)?;
    let back = crate::checkpoint::load_policy(&tmp)?;
    check.expect(
        back.params.content_hash() == ckpt.params.content_hash() && back.rng == ckpt.rng,
        "checkpoint round trip preserves every parameter bit and the rng state",
    );
    Ok(check.finish("11", "determinism and persistence", started, None))
}

/// Runs the whole suite (optionally filtered by id substring), reusing any
/// completed training runs under `work_dir`.
pub fn run_suite(work_dir: &Path, filter: Option<&str>) -> Result<Vec<CriterionResult>> {
    std::fs::create_dir_all(work_dir)?;
    let wanted = |id: &str| filter.map_or(true, |f| id.contains(f));
    let mut results = Vec::new();
    if wanted("1") {
        results.push(criterion_1_gradient_correctness());
    }
    if wanted("2") {
        results.push(criterion_2_mc_value_unbiasedness());
    }
    if wanted("3") {
        results.push(criterion_3_policy_gradient_unbiasedness());
    }
    if wanted("4") {
        results.push(criterion_4_gae_identities());
    }
    if wanted("5") {
        results.push(criterion_5_kl_estimator());
    }
    if wanted("6") {
        results.push(criterion_6_credit_assignment(work_dir)?);
    }
    if wanted("7") {
        results.push(criterion_7_k_ablation(work_dir)?);
    }
    if wanted("8") {
        results.push(criterion_8_kl_efficiency(work_dir)?);
    }
    if wanted("9") {
        results.push(criterion_9_value_analysis(work_dir)?);
    }
    if wanted("10") {
        results.push(criterion_10_baselines(work_dir)?);
    }
    if wanted("11") {
        results.push(criterion_11_determinism(work_dir)?);
    }
    Ok(results)
}
