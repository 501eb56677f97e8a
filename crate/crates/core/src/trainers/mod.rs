//! Training algorithms: supervised pretraining, clipped-surrogate policy
//! optimization with either a critic or Monte-Carlo step advantages, and
//! the rejection-finetuning / preference-pair baselines.

mod dpo;
mod ppo;
mod restem;
mod sft;

pub use dpo::{build_preference_pairs, dpo_positive_loss, dpo_train, DpoConfig, PreferencePair};
pub use ppo::{ppo_policy_loss, run_ppo, PpoOutcome, RunEvent, ValueSource};
pub use restem::{reinforce_gradient, restem_gradient, restem_train, RestemConfig};
pub use sft::{sft_pretrain, SftConfig, SftReport};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{Env, TaskInstance, TokenMdpState};
use crate::error::{Error, Result};
use crate::policy::{exact_kl, PolicySnapshot};
use crate::rollout;

/// Train/validation/test task splits.
#[derive(Debug, Clone)]
pub struct TaskSets {
    pub train: Vec<TaskInstance>,
    pub val: Vec<TaskInstance>,
    pub test: Vec<TaskInstance>,
}

/// Hyperparameters shared by the critic-based and Monte-Carlo variants of
/// the clipped-surrogate loop; the two differ only in how advantages are
/// estimated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub iterations: u64,
    /// Prompts drawn from the train split per iteration.
    pub batch_prompts: usize,
    pub samples_per_prompt: usize,
    /// Trajectories per optimizer step; must divide the batch size.
    pub minibatch_trajs: usize,
    pub epochs_per_iter: usize,
    /// Surrogate clip width.
    pub clip_eps: f64,
    /// Value prediction clip width.
    pub value_clip: f64,
    /// KL penalty coefficient (fixed; no adaptive controller).
    pub kl_beta: f64,
    pub lr_policy: f64,
    pub lr_value: f64,
    /// Sampling temperature for training trajectories.
    pub temperature: f64,
    /// Temperature for Monte-Carlo value rollouts; defaults to the
    /// training temperature when unset.
    pub mc_temperature: Option<f64>,
    pub gae_lambda: f64,
    pub gamma: f64,
    /// Rollouts per step boundary for Monte-Carlo advantages.
    pub mc_k: u32,
    pub eval_rounds: u32,
    pub eval_temperature: f64,
    /// Cap on train tasks used for accuracy evaluation (0 = all).
    pub eval_subset: usize,
    /// Audit the value predictor every N iterations (0 = never).
    pub audit_every: u64,
    pub audit_trajectories: usize,
    /// Top-action trials per audited iteration.
    pub audit_trials: usize,
    pub leaf_budget: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            iterations: 30,
            batch_prompts: 8,
            samples_per_prompt: 8,
            minibatch_trajs: 16,
            epochs_per_iter: 2,
            clip_eps: 0.2,
            value_clip: 0.2,
            kl_beta: 0.02,
            lr_policy: 1e-3,
            lr_value: 1e-3,
            temperature: 0.6,
            mc_temperature: None,
            gae_lambda: 1.0,
            gamma: 1.0,
            mc_k: 9,
            eval_rounds: 16,
            eval_temperature: 0.35,
            eval_subset: 128,
            audit_every: 5,
            audit_trajectories: 64,
            audit_trials: 64,
            leaf_budget: crate::value::DEFAULT_LEAF_BUDGET,
        }
    }
}

impl PpoConfig {
    pub fn batch_trajectories(&self) -> usize {
        self.batch_prompts * self.samples_per_prompt
    }

    pub fn mc_temperature(&self) -> f64 {
        self.mc_temperature.unwrap_or(self.temperature)
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        if self.batch_prompts == 0 || self.samples_per_prompt == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.minibatch_trajs == 0 || self.batch_trajectories() % self.minibatch_trajs != 0 {
            return Err(Error::Config(format!(
                "minibatch_trajs {} must divide the {}-trajectory batch",
                self.minibatch_trajs,
                self.batch_trajectories()
            )));
        }
        if self.epochs_per_iter == 0 {
            return Err(Error::Config("epochs_per_iter must be >= 1".into()));
        }
        if !(self.clip_eps > 0.0) || !(self.value_clip > 0.0) {
            return Err(Error::Config("clip widths must be positive".into()));
        }
        if self.kl_beta < 0.0 {
            return Err(Error::Config("kl_beta must be >= 0".into()));
        }
        if !(self.lr_policy > 0.0) || !(self.lr_value > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(self.temperature > 0.0) || !(self.mc_temperature() > 0.0) {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) || !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config("gae_lambda and gamma must lie in [0, 1]".into()));
        }
        if self.mc_k == 0 {
            return Err(Error::Config("mc_k must be >= 1".into()));
        }
        if self.eval_rounds == 0 || !(self.eval_temperature > 0.0) {
            return Err(Error::Config("evaluation settings must be positive".into()));
        }
        Ok(())
    }
}

/// Fraction of tasks the greedy decoder solves.
pub fn greedy_accuracy(env: &Env, policy: &PolicySnapshot, tasks: &[TaskInstance]) -> Result<f64> {
    if tasks.is_empty() {
        return Err(Error::Contract("accuracy over an empty task set".into()));
    }
    let total: f64 = tasks
        .par_iter()
        .map(|t| rollout::greedy_trajectory(env, policy, t).map(|traj| traj.ret))
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .sum();
    Ok(total / tasks.len() as f64)
}

/// Mean reward of sampled responses, averaged over `rounds` independent
/// evaluation rounds per task. RNG streams derive from (seed, round, task),
/// so the estimate is identical regardless of thread count.
pub fn sampled_accuracy(
    env: &Env,
    policy: &PolicySnapshot,
    tasks: &[TaskInstance],
    temperature: f64,
    rounds: u32,
    seed: u64,
) -> Result<f64> {
    if tasks.is_empty() {
        return Err(Error::Contract("accuracy over an empty task set".into()));
    }
    let jobs: Vec<(usize, u32)> = (0..tasks.len())
        .flat_map(|t| (0..rounds).map(move |r| (t, r)))
        .collect();
    let total: f64 = jobs
        .into_par_iter()
        .map(|(t, r)| {
            let mut rng = crate::rng::stream(seed, &[0xe0a1, r as u64, t as u64]);
            rollout::sample_trajectory(env, policy, &tasks[t], temperature, &mut rng)
                .map(|traj| traj.ret)
        })
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .sum();
    Ok(total / (tasks.len() as f64 * rounds as f64))
}

/// Exact KL(pi || pi_ref) by vocabulary summation, averaged over states.
pub fn mean_exact_kl(
    policy: &PolicySnapshot,
    reference: &PolicySnapshot,
    states: &[TokenMdpState],
) -> f64 {
    if states.is_empty() {
        return 0.0;
    }
    let total: f64 = states
        .par_iter()
        .map(|s| exact_kl(policy, reference, s))
        .sum();
    total / states.len() as f64
}
