//! Per-token advantages from value estimates.
//!
//! The Monte-Carlo路 path groups tokens into reasoning steps (split at SEP,
//! which closes the step it terminates), estimates V at each step-boundary
//! state, forms one advantage per step
//! `A = r_step + V(next boundary) - V(boundary)` with gamma = 1 and the
//! terminal state valued at 0, and broadcasts it to every token of the
//! step. The critic path computes GAE from per-token value predictions; at
//! lambda = 1, gamma = 1 it reduces to `G_t - V(s_t)`, which is the form
//! used by default.

use serde::{Deserialize, Serialize};

use crate::env::{Env, TaskInstance, Trajectory, Vocab};
use crate::error::{Error, Result};
use crate::policy::PolicySnapshot;
use crate::value::{self, ValueNet};

/// Steps longer than this many tokens are split greedily at the limit.
pub const MAX_STEP_TOKENS: usize = 100;

/// Half-open token-index range of one reasoning step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRange {
    pub start: usize,
    pub end: usize,
}

impl StepRange {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

/// Contiguous, non-overlapping ranges covering every generated token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepSegmentation {
    pub ranges: Vec<StepRange>,
}

impl StepSegmentation {
    pub fn num_steps(&self) -> usize {
        self.ranges.len()
    }

    /// Token indices where steps begin (one per step).
    pub fn boundaries(&self) -> impl Iterator<Item = usize> + '_ {
        self.ranges.iter().map(|r| r.start)
    }
}

/// Splits a trajectory's generated tokens into reasoning steps: SEP ends
/// the step it belongs to, and any step reaching [`MAX_STEP_TOKENS`] is cut
/// there.
pub fn segment_steps(traj: &Trajectory, vocab: &Vocab) -> StepSegmentation {
    let mut ranges = Vec::new();
    let mut start = 0usize;
    for (i, &a) in traj.actions.iter().enumerate() {
        let len = i + 1 - start;
        if a == vocab.sep() || len == MAX_STEP_TOKENS {
            ranges.push(StepRange { start, end: i + 1 });
            start = i + 1;
        }
    }
    if start < traj.actions.len() {
        ranges.push(StepRange {
            start,
            end: traj.actions.len(),
        });
    }
    StepSegmentation { ranges }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum AdvantageMethod {
    Gae { lambda: f64, gamma: f64 },
    Mc { k: u32 },
}

/// Per-token advantages aligned with a trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageRecord {
    pub per_token: Vec<f64>,
    pub method: AdvantageMethod,
}

/// One advantage per step from boundary values: `boundary_values[j]` is
/// V at the state starting step j, and the state after the last step is
/// terminal with value 0.
pub fn step_advantages(step_rewards: &[f64], boundary_values: &[f64]) -> Vec<f64> {
    assert_eq!(step_rewards.len(), boundary_values.len());
    let m = step_rewards.len();
    (0..m)
        .map(|j| {
            let v_next = if j + 1 < m { boundary_values[j + 1] } else { 0.0 };
            step_rewards[j] + v_next - boundary_values[j]
        })
        .collect()
}

/// Sums the rewards that fall inside each step.
pub fn step_rewards(traj: &Trajectory, seg: &StepSegmentation) -> Vec<f64> {
    seg.ranges
        .iter()
        .map(|r| traj.rewards[r.start..r.end].iter().sum())
        .collect()
}

/// Broadcasts per-step advantages onto tokens. Exposed separately so exact
/// oracle values can be substituted for the Monte-Carlo boundary estimates.
pub fn advantages_from_boundary_values(
    traj: &Trajectory,
    seg: &StepSegmentation,
    boundary_values: &[f64],
    method: AdvantageMethod,
) -> AdvantageRecord {
    let rewards = step_rewards(traj, seg);
    let per_step = step_advantages(&rewards, boundary_values);
    let mut per_token = vec![0.0; traj.len()];
    for (range, &a) in seg.ranges.iter().zip(&per_step) {
        for t in range.start..range.end {
            per_token[t] = a;
        }
    }
    AdvantageRecord { per_token, method }
}

/// Monte-Carlo advantages plus the boundary estimates they came from
/// (reused by the audit log) and the rollout cost spent.
#[derive(Debug, Clone)]
pub struct McAdvantages {
    pub record: AdvantageRecord,
    pub segmentation: StepSegmentation,
    pub boundary_values: Vec<f64>,
    pub rollouts: u64,
    pub rollout_tokens: u64,
}

/// Estimates V at every step boundary with K rollouts each (one estimate
/// per boundary, shared by the two adjacent steps), then broadcasts the
/// per-step advantages to tokens. Rollout RNG streams are derived from
/// `seed` per boundary, so results are independent of scheduling.
pub fn mc_advantages(
    env: &Env,
    policy: &PolicySnapshot,
    traj: &Trajectory,
    seg: &StepSegmentation,
    k: u32,
    temperature: f64,
    seed: u64,
) -> Result<McAdvantages> {
    if k < 1 {
        return Err(Error::Config("mc_advantages needs k >= 1".into()));
    }
    let states = traj.states(env);
    let mut boundary_values = Vec::with_capacity(seg.num_steps());
    let mut rollout_tokens = 0u64;
    for (j, b) in seg.boundaries().enumerate() {
        let mut rng = crate::rng::stream(seed, &[j as u64, b as u64]);
        let (est, tokens) =
            value::mc_value_counted(env, policy, &traj.task, &states[b], k, temperature, &mut rng)?;
        boundary_values.push(est.value);
        rollout_tokens += tokens;
    }
    let record = advantages_from_boundary_values(
        traj,
        seg,
        &boundary_values,
        AdvantageMethod::Mc { k },
    );
    Ok(McAdvantages {
        record,
        segmentation: seg.clone(),
        boundary_values,
        rollouts: seg.num_steps() as u64 * k as u64,
        rollout_tokens,
    })
}

/// Generalized advantage estimation from per-token critic predictions,
/// with the terminal state valued at 0:
///
/// ```text
/// delta_t = r_t + gamma V(s_{t+1}) - V(s_t)
/// A_t     = sum_l (gamma lambda)^l delta_{t+l}
/// ```
///
/// At lambda = 1 and gamma = 1 this telescopes to `G_t - V(s_t)`, and that
/// simplified form is evaluated directly so the identity holds exactly.
pub fn gae_advantages(
    valnet: &ValueNet,
    env: &Env,
    traj: &Trajectory,
    lambda: f64,
    gamma: f64,
) -> Result<AdvantageRecord> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("gae lambda {lambda} outside [0, 1]")));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Config(format!("gamma {gamma} outside [0, 1]")));
    }
    let t_len = traj.len();
    let states = traj.states(env);
    let values: Vec<f64> = (0..t_len).map(|t| valnet.predict(&states[t])).collect();
    let method = AdvantageMethod::Gae { lambda, gamma };

    if lambda == 1.0 && gamma == 1.0 {
        let mut per_token = vec![0.0; t_len];
        let mut suffix = 0.0;
        for t in (0..t_len).rev() {
            suffix += traj.rewards[t];
            per_token[t] = suffix - values[t];
        }
        return Ok(AdvantageRecord { per_token, method });
    }

    let mut per_token = vec![0.0; t_len];
    let mut acc = 0.0;
    for t in (0..t_len).rev() {
        let v_next = if t + 1 < t_len { values[t + 1] } else { 0.0 };
        let delta = traj.rewards[t] + gamma * v_next - values[t];
        acc = delta + gamma * lambda * acc;
        per_token[t] = acc;
    }
    Ok(AdvantageRecord { per_token, method })
}

/// Zero-mean unit-variance normalization across every token of the batch,
/// applied the same way for both advantage methods. A fully constant batch
/// comes back as all zeros thanks to the epsilon in the denominator.
pub fn normalize_advantages(records: &[AdvantageRecord]) -> Result<Vec<AdvantageRecord>> {
    let n: usize = records.iter().map(|r| r.per_token.len()).sum();
    if n < 2 {
        return Err(Error::Contract(
            "advantage normalization needs at least 2 tokens".into(),
        ));
    }
    let mut flat = records.iter().flat_map(|r| r.per_token.iter());
    let first = *flat.next().expect("n >= 2");
    if flat.all(|&a| a == first) {
        // exactly constant batch: the guard case, all zeros
        return Ok(records
            .iter()
            .map(|r| AdvantageRecord {
                per_token: vec![0.0; r.per_token.len()],
                method: r.method,
            })
            .collect());
    }
    let mean: f64 = records
        .iter()
        .flat_map(|r| r.per_token.iter())
        .sum::<f64>()
        / n as f64;
    let var: f64 = records
        .iter()
        .flat_map(|r| r.per_token.iter())
        .map(|a| (a - mean) * (a - mean))
        .sum::<f64>()
        / n as f64;
    let denom = var.sqrt() + 1e-8;
    Ok(records
        .iter()
        .map(|r| AdvantageRecord {
            per_token: r.per_token.iter().map(|a| (a - mean) / denom).collect(),
            method: r.method,
        })
        .collect())
}

/// Dump record for one trajectory's advantages (JSONL line).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdvantageDump {
    pub trajectory: usize,
    pub ranges: Vec<StepRange>,
    pub boundary_values: Vec<f64>,
    pub per_token: Vec<f64>,
    pub method: AdvantageMethod,
}

/// Exact boundary values for a trajectory, for substituting the oracle
/// into the Monte-Carlo advantage path at tiny scale.
pub fn exact_boundary_values(
    env: &Env,
    policy: &PolicySnapshot,
    task: &TaskInstance,
    traj: &Trajectory,
    seg: &StepSegmentation,
    temperature: f64,
    leaf_budget: u64,
) -> Result<Vec<f64>> {
    let states = traj.states(env);
    seg.boundaries()
        .map(|b| {
            value::exact_value_stats(env, policy, task, &states[b], temperature, leaf_budget)
                .map(|s| s.value)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{task_from_digits, Difficulty, TokenMdpState};
    use crate::policy::{Arch, Policy, PolicyConfig, PolicyParams};
    use crate::value::DEFAULT_LEAF_BUDGET;

    fn tiny() -> (Env, TaskInstance, Vocab) {
        let vocab = Vocab::new(2).unwrap();
        let diff = Difficulty { n: 2, base: 2 };
        let env = Env::for_difficulty(&diff).unwrap();
        let task = task_from_digits(&[1, 1], &diff, &vocab);
        (env, task, vocab)
    }

    fn fake_traj(task: &TaskInstance, actions: Vec<u32>, final_reward: f64) -> Trajectory {
        let n = actions.len();
        let mut rewards = vec![0.0; n];
        if n > 0 {
            rewards[n - 1] = final_reward;
        }
        Trajectory {
            task: task.clone(),
            actions,
            rewards,
            logprobs: vec![0.0; n],
            ret: final_reward,
        }
    }

    /// Near-deterministic tabular policy that follows the reference
    /// solution from every state it can reach.
    fn reference_policy(env: &Env, task: &TaskInstance, vocab: Vocab) -> PolicySnapshot {
        let mut policy = Policy::new(
            vocab,
            PolicyConfig {
                arch: Arch::Tabular,
                window: 6,
                d_emb: 0,
                d_hidden: 0,
            },
            0,
        )
        .unwrap();
        let reference = crate::env::reference_solution(task, &vocab);
        let mut state = TokenMdpState::initial(task);
        for &a in &reference {
            let ctx = state.context(6, vocab.pad());
            if let PolicyParams::Tabular(t) = policy.params_mut() {
                t.row_mut(&ctx)[a as usize] = 60.0;
            }
            state = env.transition(&state, a).unwrap();
        }
        policy.snapshot()
    }

    #[test]
    fn segmentation_splits_at_sep() {
        let (_, task, vocab) = tiny();
        // [s1, SEP, s2, SEP, answer, EOS] -> [0..2) [2..4) [4..6)
        let traj = fake_traj(
            &task,
            vec![1, vocab.sep(), 0, vocab.sep(), 0, vocab.eos()],
            1.0,
        );
        let seg = segment_steps(&traj, &vocab);
        assert_eq!(
            seg.ranges,
            vec![
                StepRange { start: 0, end: 2 },
                StepRange { start: 2, end: 4 },
                StepRange { start: 4, end: 6 }
            ]
        );
    }

    #[test]
    fn segmentation_without_sep_is_one_step() {
        let (_, task, vocab) = tiny();
        let traj = fake_traj(&task, vec![1, 0, 1, vocab.eos()], 0.0);
        let seg = segment_steps(&traj, &vocab);
        assert_eq!(seg.ranges, vec![StepRange { start: 0, end: 4 }]);
    }

    #[test]
    fn segmentation_enforces_token_limit() {
        let vocab = Vocab::new(10).unwrap();
        let diff = Difficulty { n: 1, base: 10 };
        let task = task_from_digits(&[3], &diff, &vocab);
        let traj = fake_traj(&task, vec![1u32; 250], 0.0);
        let seg = segment_steps(&traj, &vocab);
        assert_eq!(
            seg.ranges,
            vec![
                StepRange { start: 0, end: 100 },
                StepRange { start: 100, end: 200 },
                StepRange { start: 200, end: 250 }
            ]
        );
    }

    #[test]
    fn segmentation_is_a_partition_of_sampled_trajectories() {
        let (env, task, vocab) = tiny();
        let policy = Policy::new(
            vocab,
            PolicyConfig {
                arch: Arch::Mlp,
                window: 6,
                d_emb: 4,
                d_hidden: 8,
            },
            3,
        )
        .unwrap()
        .snapshot();
        let mut rng = crate::rng::stream(8, &[]);
        for _ in 0..100 {
            let traj =
                crate::rollout::sample_trajectory(&env, &policy, &task, 1.0, &mut rng).unwrap();
            let seg = segment_steps(&traj, &vocab);
            let mut covered = 0usize;
            for r in &seg.ranges {
                assert_eq!(r.start, covered, "ranges must be contiguous");
                assert!(r.end > r.start, "ranges must be non-empty");
                covered = r.end;
            }
            assert_eq!(covered, traj.len(), "ranges must cover all tokens");
        }
    }

    #[test]
    fn perfect_policy_has_zero_advantages() {
        let (env, task, vocab) = tiny();
        let policy = reference_policy(&env, &task, vocab);
        let traj = {
            let mut rng = crate::rng::stream(1, &[]);
            crate::rollout::sample_trajectory(&env, &policy, &task, 1.0, &mut rng).unwrap()
        };
        assert_eq!(traj.ret, 1.0);
        let seg = segment_steps(&traj, &vocab);
        let mc = mc_advantages(&env, &policy, &traj, &seg, 3, 1.0, 99).unwrap();
        for (t, a) in mc.record.per_token.iter().enumerate() {
            assert!(
                a.abs() < 1e-12,
                "token {t}: advantage {a} should vanish when every continuation succeeds"
            );
        }
    }

    #[test]
    fn failed_final_step_advantage_is_minus_boundary_value() {
        let (_, task, vocab) = tiny();
        // Single-step failed trajectory: boundary value v, terminal value 0,
        // step reward 0 -> advantage -v.
        let traj = fake_traj(&task, vec![0, vocab.eos()], 0.0);
        let seg = segment_steps(&traj, &vocab);
        let v = 0.37;
        let rec = advantages_from_boundary_values(
            &traj,
            &seg,
            &[v],
            AdvantageMethod::Mc { k: 1 },
        );
        assert_eq!(rec.per_token, vec![-v, -v]);
    }

    #[test]
    fn exact_values_telescope_to_return_minus_initial_value() {
        let (env, task, vocab) = tiny();
        let policy = Policy::new(
            vocab,
            PolicyConfig {
                arch: Arch::Mlp,
                window: 6,
                d_emb: 4,
                d_hidden: 8,
            },
            21,
        )
        .unwrap()
        .snapshot();
        let mut rng = crate::rng::stream(31, &[]);
        for _ in 0..20 {
            let traj =
                crate::rollout::sample_trajectory(&env, &policy, &task, 1.0, &mut rng).unwrap();
            let seg = segment_steps(&traj, &vocab);
            let boundary = exact_boundary_values(
                &env,
                &policy,
                &task,
                &traj,
                &seg,
                1.0,
                DEFAULT_LEAF_BUDGET,
            )
            .unwrap();
            let rewards = step_rewards(&traj, &seg);
            let advs = step_advantages(&rewards, &boundary);
            let total: f64 = advs.iter().sum();
            let expect = traj.ret - boundary[0];
            assert!(
                (total - expect).abs() < 1e-9,
                "telescoping broke: {total} vs {expect}"
            );
        }
    }

    #[test]
    fn mc_advantages_are_constant_within_each_step() {
        let (env, task, vocab) = tiny();
        let policy = Policy::new(
            vocab,
            PolicyConfig {
                arch: Arch::Mlp,
                window: 6,
                d_emb: 4,
                d_hidden: 8,
            },
            5,
        )
        .unwrap()
        .snapshot();
        let mut rng = crate::rng::stream(77, &[]);
        let traj = crate::rollout::sample_trajectory(&env, &policy, &task, 1.0, &mut rng).unwrap();
        let seg = segment_steps(&traj, &vocab);
        let mc = mc_advantages(&env, &policy, &traj, &seg, 3, 1.0, 5).unwrap();
        for r in &seg.ranges {
            let first = mc.record.per_token[r.start].to_bits();
            for t in r.start..r.end {
                assert_eq!(
                    mc.record.per_token[t].to_bits(),
                    first,
                    "tokens of one step must share the bit-identical advantage"
                );
            }
        }
    }

    #[test]
    fn gae_at_lambda_one_is_return_minus_baseline() {
        let (env, task, vocab) = tiny();
        let policy = Policy::new(
            vocab,
            PolicyConfig {
                arch: Arch::Mlp,
                window: 6,
                d_emb: 4,
                d_hidden: 8,
            },
            9,
        )
        .unwrap()
        .snapshot();
        let valnet = ValueNet::from_policy(&policy, 1).unwrap();
        let mut rng = crate::rng::stream(13, &[]);
        let traj = crate::rollout::sample_trajectory(&env, &policy, &task, 1.0, &mut rng).unwrap();
        let rec = gae_advantages(&valnet, &env, &traj, 1.0, 1.0).unwrap();
        let states = traj.states(&env);
        let mut suffix = 0.0;
        for t in (0..traj.len()).rev() {
            suffix += traj.rewards[t];
            let expect = suffix - valnet.predict(&states[t]);
            assert_eq!(
                rec.per_token[t], expect,
                "lambda=1 gamma=1 must equal G_t - V(s_t) exactly"
            );
        }
    }

    #[test]
    fn gae_at_lambda_zero_is_one_step_td() {
        let (env, task, vocab) = tiny();
        let policy = Policy::new(
            vocab,
            PolicyConfig {
                arch: Arch::Mlp,
                window: 6,
                d_emb: 4,
                d_hidden: 8,
            },
            10,
        )
        .unwrap()
        .snapshot();
        let valnet = ValueNet::from_policy(&policy, 2).unwrap();
        let mut rng = crate::rng::stream(14, &[]);
        let traj = crate::rollout::sample_trajectory(&env, &policy, &task, 1.0, &mut rng).unwrap();
        let rec = gae_advantages(&valnet, &env, &traj, 0.0, 1.0).unwrap();
        let states = traj.states(&env);
        for t in 0..traj.len() {
            let v = valnet.predict(&states[t]);
            let v_next = if t + 1 < traj.len() {
                valnet.predict(&states[t + 1])
            } else {
                0.0
            };
            let delta = traj.rewards[t] + v_next - v;
            assert_eq!(rec.per_token[t], delta, "lambda=0 must equal delta_t");
        }
    }

    #[test]
    fn gae_rejects_out_of_range_parameters() {
        let (env, task, vocab) = tiny();
        let policy = Policy::new(
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
        let valnet = ValueNet::from_policy(&policy, 3).unwrap();
        let traj = fake_traj(&task, vec![0, vocab.eos()], 0.0);
        assert!(matches!(
            gae_advantages(&valnet, &env, &traj, 1.5, 1.0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            gae_advantages(&valnet, &env, &traj, 1.0, -0.1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn normalization_definition_and_guard() {
        let (_, task, _) = tiny();
        let rec = AdvantageRecord {
            per_token: vec![0.3, -1.2, 2.4, 0.8, -0.5],
            method: AdvantageMethod::Mc { k: 1 },
        };
        let out = normalize_advantages(std::slice::from_ref(&rec)).unwrap();
        let vals = &out[0].per_token;
        let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
        let std =
            (vals.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / vals.len() as f64).sqrt();
        assert!(mean.abs() < 1e-9, "mean {mean}");
        assert!((std - 1.0).abs() < 1e-6, "std {std}");

        // constant batch -> zeros
        let flat = AdvantageRecord {
            per_token: vec![0.7; 6],
            method: AdvantageMethod::Mc { k: 1 },
        };
        let out = normalize_advantages(std::slice::from_ref(&flat)).unwrap();
        assert!(out[0].per_token.iter().all(|&a| a == 0.0));

        // too few tokens -> error
        let single = AdvantageRecord {
            per_token: vec![1.0],
            method: AdvantageMethod::Mc { k: 1 },
        };
        assert!(normalize_advantages(std::slice::from_ref(&single)).is_err());
        let _ = task;
    }

    #[test]
    fn normalization_is_affine_invariant() {
        let rec = AdvantageRecord {
            per_token: vec![0.1, -0.4, 1.7, 0.2, 0.9, -1.3],
            method: AdvantageMethod::Mc { k: 3 },
        };
        let scaled = AdvantageRecord {
            per_token: rec.per_token.iter().map(|a| 2.5 * a + 0.7).collect(),
            method: rec.method,
        };
        let base = normalize_advantages(std::slice::from_ref(&rec)).unwrap();
        let trans = normalize_advantages(std::slice::from_ref(&scaled)).unwrap();
        for (a, b) in base[0].per_token.iter().zip(&trans[0].per_token) {
            assert!((a - b).abs() < 1e-6, "affine invariance broke: {a} vs {b}");
        }
    }

    #[test]
    fn well_trained_policy_has_mostly_near_zero_step_advantages() {
        let (env, task, vocab) = tiny();
        let policy = reference_policy(&env, &task, vocab);
        let mut small = 0usize;
        let mut large = 0usize;
        let mut rng = crate::rng::stream(4242, &[]);
        for s in 0..20u64 {
            let traj =
                crate::rollout::sample_trajectory(&env, &policy, &task, 1.0, &mut rng).unwrap();
            let seg = segment_steps(&traj, &vocab);
            let mc = mc_advantages(&env, &policy, &traj, &seg, 9, 1.0, s).unwrap();
            let rewards = step_rewards(&traj, &seg);
            for a in step_advantages(&rewards, &mc.boundary_values) {
                if a.abs() < 0.05 {
                    small += 1;
                } else {
                    large += 1;
                }
            }
        }
        assert!(
            small > large,
            "near-zero steps ({small}) should dominate ({large})"
        );
    }
}
