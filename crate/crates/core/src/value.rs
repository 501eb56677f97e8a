//! State-value estimation: Monte-Carlo rollouts, exact enumeration, and a
//! learned value network.
//!
//! The Monte-Carlo estimate of V(s) samples K independent completions from
//! s and averages their returns; those completions are evaluation-only and
//! are never trained on. The enumeration oracle walks every completion of
//! the remaining tree, weighting leaf returns by their policy probability —
//! exact, but only affordable when `vocab^(remaining tokens)` fits a leaf
//! budget. The value network shares the policy MLP trunk with a scalar
//! head and is trained on empirical returns with a clipped squared loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Env, TaskInstance, TokenMdpState};
use crate::error::{Error, Result};
use crate::grad_check::FlatParams;
use crate::policy::{MlpDims, MlpParams, MlpTrunk, PolicyParams, PolicySnapshot};
use crate::rollout;

/// Default cap on enumerated leaves (~sub-second oracle calls).
pub const DEFAULT_LEAF_BUDGET: u64 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimateMethod {
    Net,
    Mc,
    Exact,
}

/// A value estimate tagged with how it was produced.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ValueEstimate {
    pub value: f64,
    pub method: EstimateMethod,
    /// Rollout count for the MC method.
    pub k: Option<u32>,
    /// Content hash of the state the estimate refers to.
    pub state_id: u64,
}

/// Mean return of `k` independent completions sampled from `state` at the
/// given temperature. A terminal state has no future reward and evaluates
/// to exactly 0.
pub fn mc_value(
    env: &Env,
    policy: &PolicySnapshot,
    task: &TaskInstance,
    state: &TokenMdpState,
    k: u32,
    temperature: f64,
    rng: &mut impl Rng,
) -> Result<ValueEstimate> {
    mc_value_counted(env, policy, task, state, k, temperature, rng).map(|(est, _)| est)
}

/// [`mc_value`] plus the number of tokens the rollouts generated.
pub fn mc_value_counted(
    env: &Env,
    policy: &PolicySnapshot,
    task: &TaskInstance,
    state: &TokenMdpState,
    k: u32,
    temperature: f64,
    rng: &mut impl Rng,
) -> Result<(ValueEstimate, u64)> {
    if k < 1 {
        return Err(Error::Config("mc_value needs k >= 1".into()));
    }
    let mut total = 0.0;
    let mut tokens = 0u64;
    if !state.is_terminal() {
        for _ in 0..k {
            let (ret, t) =
                rollout::continuation_return(env, policy, task, state, temperature, rng)?;
            total += ret;
            tokens += t;
        }
    }
    let value = total / k as f64;
    debug_assert!((0.0..=1.0).contains(&value));
    Ok((
        ValueEstimate {
            value,
            method: EstimateMethod::Mc,
            k: Some(k),
            state_id: state.state_id(),
        },
        tokens,
    ))
}

/// Enumeration output with the diagnostics tests care about: the total
/// probability mass of visited leaves telescopes to one.
#[derive(Debug, Clone, Copy)]
pub struct ExactValueStats {
    pub value: f64,
    pub leaf_mass: f64,
    pub leaves: u64,
}

/// Exact V(s) under the sampling distribution at `temperature`, by
/// depth-first enumeration of every completion. Errors with
/// [`Error::OracleUnavailable`] when the worst-case remaining tree
/// `vocab^(max_length - generated)` exceeds `leaf_budget`; callers then
/// fall back to a large-K [`mc_value`].
pub fn exact_value_stats(
    env: &Env,
    policy: &PolicySnapshot,
    task: &TaskInstance,
    state: &TokenMdpState,
    temperature: f64,
    leaf_budget: u64,
) -> Result<ExactValueStats> {
    if state.is_terminal() {
        return Ok(ExactValueStats {
            value: 0.0,
            leaf_mass: 1.0,
            leaves: 1,
        });
    }
    let remaining = (env.max_length - state.generated().len()) as u32;
    let tree_bound = (env.vocab.size() as u128).checked_pow(remaining);
    match tree_bound {
        Some(bound) if bound <= leaf_budget as u128 => {}
        _ => {
            return Err(Error::OracleUnavailable(format!(
                "{}^{} completions exceed the {} leaf budget",
                env.vocab.size(),
                remaining,
                leaf_budget
            )))
        }
    }
    let mut stats = ExactValueStats {
        value: 0.0,
        leaf_mass: 0.0,
        leaves: 0,
    };
    enumerate(env, policy, task, state, temperature, 1.0, &mut stats)?;
    debug_assert!(
        (stats.leaf_mass - 1.0).abs() < 1e-9,
        "leaf probabilities summed to {}",
        stats.leaf_mass
    );
    Ok(stats)
}

fn enumerate(
    env: &Env,
    policy: &PolicySnapshot,
    task: &TaskInstance,
    state: &TokenMdpState,
    temperature: f64,
    path_prob: f64,
    stats: &mut ExactValueStats,
) -> Result<()> {
    let probs = policy.action_probs(state, temperature)?;
    for (a, &p) in probs.iter().enumerate() {
        let action = a as u32;
        let reward = env.reward(state, action, task);
        let next = env.transition(state, action)?;
        stats.value += path_prob * p * reward;
        if next.is_terminal() {
            stats.leaf_mass += path_prob * p;
            stats.leaves += 1;
        } else {
            enumerate(env, policy, task, &next, temperature, path_prob * p, stats)?;
        }
    }
    Ok(())
}

/// [`exact_value_stats`] wrapped as a tagged estimate.
pub fn exact_value(
    env: &Env,
    policy: &PolicySnapshot,
    task: &TaskInstance,
    state: &TokenMdpState,
    temperature: f64,
    leaf_budget: u64,
) -> Result<ValueEstimate> {
    let stats = exact_value_stats(env, policy, task, state, temperature, leaf_budget)?;
    Ok(ValueEstimate {
        value: stats.value,
        method: EstimateMethod::Exact,
        k: None,
        state_id: state.state_id(),
    })
}

/// Value network: the policy MLP trunk with a scalar head. Created by
/// copying the reference policy's trunk, so it starts from the same
/// representation the policy learned during pretraining.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueNet {
    pub trunk: MlpTrunk,
    /// d_hidden weights of the scalar head.
    pub head_w: Vec<f64>,
    pub head_b: f64,
}

impl ValueNet {
    /// Independent copy of an MLP policy's trunk plus a freshly initialized
    /// scalar head. Fails for tabular policies, which have no trunk to
    /// copy; the critic path requires the MLP architecture.
    pub fn from_policy(policy: &PolicySnapshot, seed: u64) -> Result<Self> {
        match policy.params() {
            PolicyParams::Mlp(mlp) => Ok(Self::from_mlp(mlp, seed)),
            PolicyParams::Tabular(_) => Err(Error::Config(
                "value network requires an mlp policy to copy its trunk from".into(),
            )),
        }
    }

    pub fn from_mlp(mlp: &MlpParams, seed: u64) -> Self {
        let dims = *mlp.dims();
        let mut rng = crate::rng::stream(seed, &[0x7a1e]);
        let head_w = (0..dims.d_hidden)
            .map(|_| rng.gen_range(-crate::policy::mlp::INIT_SCALE..crate::policy::mlp::INIT_SCALE))
            .collect();
        Self {
            trunk: mlp.trunk.clone(),
            head_w,
            head_b: 0.0,
        }
    }

    pub fn zeros(dims: MlpDims) -> Self {
        Self {
            trunk: MlpTrunk::zeros(dims),
            head_w: vec![0.0; dims.d_hidden],
            head_b: 0.0,
        }
    }

    pub fn dims(&self) -> &MlpDims {
        &self.trunk.dims
    }

    pub fn n_params(&self) -> usize {
        self.dims().trunk_params() + self.dims().d_hidden + 1
    }

    fn ctx(&self, state: &TokenMdpState) -> Vec<u32> {
        // The padding id is one past the vocabulary by construction.
        state.context(self.dims().window, self.dims().vocab_size as u32)
    }

    /// Deterministic scalar prediction; not clamped to [0, 1] — analysis
    /// clamps only for reporting, never for training.
    pub fn predict(&self, state: &TokenMdpState) -> f64 {
        let cache = self.trunk.forward(&self.ctx(state));
        self.head_w
            .iter()
            .zip(&cache.h)
            .map(|(w, h)| w * h)
            .sum::<f64>()
            + self.head_b
    }

    pub fn predict_estimate(&self, state: &TokenMdpState) -> ValueEstimate {
        ValueEstimate {
            value: self.predict(state),
            method: EstimateMethod::Net,
            k: None,
            state_id: state.state_id(),
        }
    }

    /// Accumulates `dv * d(prediction)/d(params)` into `grad` (layout
    /// `[embed | w1 | b1 | head_w | head_b]`).
    pub fn accumulate_grad(&self, state: &TokenMdpState, dv: f64, grad: &mut [f64]) {
        debug_assert_eq!(grad.len(), self.n_params());
        let cache = self.trunk.forward(&self.ctx(state));
        let d = self.dims();
        let (g_trunk, rest) = grad.split_at_mut(d.trunk_params());
        let (g_head_w, g_head_b) = rest.split_at_mut(d.d_hidden);
        let mut dh = vec![0.0; d.d_hidden];
        for j in 0..d.d_hidden {
            g_head_w[j] += dv * cache.h[j];
            dh[j] = dv * self.head_w[j];
        }
        g_head_b[0] += dv;
        self.trunk.backward(&cache, &dh, g_trunk);
    }

    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for i in 0..self.n_params() {
            for b in self.flat_get(i).to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}

impl FlatParams for ValueNet {
    fn flat_len(&self) -> usize {
        self.n_params()
    }

    fn flat_get(&self, i: usize) -> f64 {
        let d = *self.dims();
        let trunk = d.trunk_params();
        let embed = d.embed_rows() * d.d_emb;
        let w1 = d.d_hidden * d.input_len();
        if i < embed {
            self.trunk.embed[i]
        } else if i < embed + w1 {
            self.trunk.w1[i - embed]
        } else if i < trunk {
            self.trunk.b1[i - embed - w1]
        } else if i < trunk + d.d_hidden {
            self.head_w[i - trunk]
        } else {
            self.head_b
        }
    }

    fn flat_set(&mut self, i: usize, v: f64) {
        let d = *self.dims();
        let trunk = d.trunk_params();
        let embed = d.embed_rows() * d.d_emb;
        let w1 = d.d_hidden * d.input_len();
        if i < embed {
            self.trunk.embed[i] = v;
        } else if i < embed + w1 {
            self.trunk.w1[i - embed] = v;
        } else if i < trunk {
            self.trunk.b1[i - embed - w1] = v;
        } else if i < trunk + d.d_hidden {
            self.head_w[i - trunk] = v;
        } else {
            self.head_b = v;
        }
    }
}

/// One regression target: a non-terminal state and its empirical return
/// G_t (the sum of rewards from t onward).
#[derive(Debug, Clone)]
pub struct ValueTarget {
    pub state: TokenMdpState,
    pub ret: f64,
}

/// Builds the per-state targets for one trajectory.
pub fn value_targets(env: &Env, traj: &crate::env::Trajectory) -> Vec<ValueTarget> {
    let states = traj.states(env);
    let mut suffix = 0.0;
    let mut rets = vec![0.0; traj.len()];
    for t in (0..traj.len()).rev() {
        suffix += traj.rewards[t];
        rets[t] = suffix;
    }
    states[..traj.len()]
        .iter()
        .cloned()
        .zip(rets)
        .map(|(state, ret)| ValueTarget { state, ret })
        .collect()
}

/// Clipped value loss over a batch of trajectories:
///
/// ```text
/// L = 1/2 * mean_traj( 1/T * sum_t max( (V(s_t) - G_t)^2,
///                                       (clip(V(s_t), V_old(s_t) +- eps) - G_t)^2 ) )
/// ```
///
/// Returns the loss and its gradient with respect to the live network.
pub fn value_net_loss(
    valnet: &ValueNet,
    old_valnet: &ValueNet,
    batch: &[Vec<ValueTarget>],
    clip: f64,
) -> Result<(f64, Vec<f64>)> {
    if !(clip > 0.0) {
        return Err(Error::Config("value clip must be positive".into()));
    }
    if batch.is_empty() || batch.iter().all(|t| t.is_empty()) {
        return Err(Error::Contract("value loss over an empty batch".into()));
    }
    let n_traj = batch.iter().filter(|t| !t.is_empty()).count() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; valnet.n_params()];
    for traj in batch.iter().filter(|t| !t.is_empty()) {
        let t_len = traj.len() as f64;
        let w = 1.0 / (2.0 * t_len * n_traj);
        for target in traj {
            let v = valnet.predict(&target.state);
            let v_old = old_valnet.predict(&target.state);
            let v_clip = v.clamp(v_old - clip, v_old + clip);
            let err = v - target.ret;
            let err_clip = v_clip - target.ret;
            let (se, dv) = if err * err >= err_clip * err_clip {
                (err * err, 2.0 * err)
            } else if (v_old - clip..=v_old + clip).contains(&v) {
                // inside the clip band the branches coincide
                (err_clip * err_clip, 2.0 * err_clip)
            } else {
                // clipped branch active and saturated: no gradient
                (err_clip * err_clip, 0.0)
            };
            loss += w * se;
            if dv != 0.0 {
                valnet.accumulate_grad(&target.state, w * dv, &mut grad);
            }
        }
    }
    Ok((loss, grad))
}
