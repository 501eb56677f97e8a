//! Autoregressive softmax policies over the token MDP.
//!
//! Two architectures share one interface: a lazily materialized context
//! table (exact score gradients in closed form) and a small MLP. A
//! [`PolicySnapshot`] is immutable and cheap to share across threads;
//! training owns a mutable [`Policy`] and publishes snapshots.
//!
//! Log-probabilities are always softmax at temperature 1 (the "model"
//! distribution); temperature only reshapes the sampling distribution.

pub mod grad;
pub mod mlp;
pub mod tabular;

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{TokenMdpState, Vocab};
use crate::error::{Error, Result};
use crate::rng as rng_util;

pub use grad::Grad;
pub use mlp::{MlpDims, MlpParams, MlpTrunk};
pub use tabular::TabularParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Tabular,
    Mlp,
}

/// Architecture and context-window settings for a policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub arch: Arch,
    /// Number of trailing tokens fed to the policy. Must cover the ModSum
    /// dependency span: emitting the k-th partial sum needs digit k, which
    /// sits `k + 5` positions back in the reference layout, so `n + 5`
    /// tokens are required for an n-digit task.
    pub window: usize,
    pub d_emb: usize,
    pub d_hidden: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            arch: Arch::Mlp,
            window: 12,
            d_emb: 16,
            d_hidden: 128,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::Config("policy window must be >= 1".into()));
        }
        if self.arch == Arch::Mlp && (self.d_emb == 0 || self.d_hidden == 0) {
            return Err(Error::Config("mlp dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Parameters for either architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PolicyParams {
    Tabular(TabularParams),
    Mlp(MlpParams),
}

impl PolicyParams {
    pub fn logits(&self, ctx: &[u32]) -> Vec<f64> {
        match self {
            PolicyParams::Tabular(t) => t.logits(ctx),
            PolicyParams::Mlp(m) => m.logits(ctx),
        }
    }

    /// Number of addressable parameters. For the tabular policy this counts
    /// only materialized rows.
    pub fn n_params(&self) -> usize {
        match self {
            PolicyParams::Tabular(t) => t.n_params(),
            PolicyParams::Mlp(m) => m.n_params(),
        }
    }

    pub fn flat_get(&self, i: usize) -> f64 {
        match self {
            PolicyParams::Tabular(t) => t.flat_get(i),
            PolicyParams::Mlp(m) => m.flat_get(i),
        }
    }

    pub fn flat_set(&mut self, i: usize, v: f64) {
        match self {
            PolicyParams::Tabular(t) => t.flat_set(i, v),
            PolicyParams::Mlp(m) => m.flat_set(i, v),
        }
    }

    /// FNV hash of every parameter bit (and table keys), used to assert
    /// snapshot immutability and to fingerprint checkpoints.
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        match self {
            PolicyParams::Tabular(t) => {
                for (ctx, row) in &t.table {
                    for &tok in ctx {
                        eat(&tok.to_le_bytes());
                    }
                    for &v in row {
                        eat(&v.to_bits().to_le_bytes());
                    }
                }
            }
            PolicyParams::Mlp(m) => {
                for i in 0..m.n_params() {
                    eat(&m.flat_get(i).to_bits().to_le_bytes());
                }
            }
        }
        h
    }
}

/// Mutable policy owned by a trainer.
#[derive(Debug, Clone)]
pub struct Policy {
    vocab: Vocab,
    config: PolicyConfig,
    params: PolicyParams,
}

impl Policy {
    /// Fresh policy. MLP weights are uniform in (-0.05, 0.05) with zero
    /// biases, drawn from a stream derived from `seed`; the tabular variant
    /// starts with an empty (uniform-everywhere) table.
    pub fn new(vocab: Vocab, config: PolicyConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = match config.arch {
            Arch::Tabular => PolicyParams::Tabular(TabularParams::new(vocab.size() as usize)),
            Arch::Mlp => {
                let dims = MlpDims {
                    vocab_size: vocab.size() as usize,
                    window: config.window,
                    d_emb: config.d_emb,
                    d_hidden: config.d_hidden,
                };
                let mut r = rng_util::stream(seed, &[0x1a17]);
                PolicyParams::Mlp(MlpParams::init(dims, &mut r))
            }
        };
        Ok(Self {
            vocab,
            config,
            params,
        })
    }

    pub fn from_parts(vocab: Vocab, config: PolicyConfig, params: PolicyParams) -> Self {
        Self {
            vocab,
            config,
            params,
        }
    }

    pub fn from_snapshot(snap: &PolicySnapshot) -> Self {
        Self {
            vocab: snap.inner.vocab,
            config: snap.inner.config,
            params: snap.inner.params.clone(),
        }
    }

    pub fn snapshot(&self) -> PolicySnapshot {
        PolicySnapshot {
            inner: Arc::new(SnapshotInner {
                vocab: self.vocab,
                config: self.config,
                params: self.params.clone(),
            }),
        }
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut PolicyParams {
        &mut self.params
    }

    /// Materializes the logit row for a state's context (tabular only).
    /// No-op for the MLP.
    pub fn materialize_state(&mut self, state: &TokenMdpState) {
        let ctx = state.context(self.config.window, self.vocab.pad());
        if let PolicyParams::Tabular(t) = &mut self.params {
            t.ensure_row(&ctx);
        }
    }
}

struct SnapshotInner {
    vocab: Vocab,
    config: PolicyConfig,
    params: PolicyParams,
}

/// Immutable, cheaply clonable view of a policy's parameters. Serves as
/// the live policy, the iteration-start behavior policy, and the frozen
/// reference policy.
#[derive(Clone)]
pub struct PolicySnapshot {
    inner: Arc<SnapshotInner>,
}

/// One state's forward pass: logits plus whatever the architecture needs
/// to push a logit-space gradient back to the parameters.
pub struct Forward {
    pub logits: Vec<f64>,
    cache: FwdCache,
}

enum FwdCache {
    Tabular(Vec<u32>),
    Mlp(mlp::TrunkCache),
}

impl PolicySnapshot {
    pub fn vocab(&self) -> &Vocab {
        &self.inner.vocab
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.inner.config
    }

    pub fn params(&self) -> &PolicyParams {
        &self.inner.params
    }

    pub fn vocab_size(&self) -> usize {
        self.inner.vocab.size() as usize
    }

    fn ctx(&self, state: &TokenMdpState) -> Vec<u32> {
        state.context(self.inner.config.window, self.inner.vocab.pad())
    }

    /// Logits over the vocabulary; rejects terminal states, where no action
    /// is defined.
    pub fn logits(&self, state: &TokenMdpState) -> Result<Vec<f64>> {
        if state.is_terminal() {
            return Err(Error::Contract("logits requested for a terminal state".into()));
        }
        Ok(self.inner.params.logits(&self.ctx(state)))
    }

    /// Forward pass with the backprop cache. Callers are responsible for
    /// only evaluating non-terminal states.
    pub fn forward(&self, state: &TokenMdpState) -> Forward {
        let ctx = self.ctx(state);
        match &self.inner.params {
            PolicyParams::Tabular(t) => Forward {
                logits: t.logits(&ctx),
                cache: FwdCache::Tabular(ctx),
            },
            PolicyParams::Mlp(m) => {
                let (logits, cache) = m.forward(&ctx);
                Forward {
                    logits,
                    cache: FwdCache::Mlp(cache),
                }
            }
        }
    }

    /// Pushes a d(loss)/d(logits) vector through the architecture,
    /// accumulating into `grad`.
    pub fn backward_logits(&self, fwd: &Forward, dlogits: &[f64], grad: &mut Grad) {
        match (&self.inner.params, &fwd.cache, grad) {
            (PolicyParams::Tabular(_), FwdCache::Tabular(ctx), Grad::Sparse(map)) => {
                let row = map
                    .entry(ctx.clone())
                    .or_insert_with(|| vec![0.0; dlogits.len()]);
                for (r, d) in row.iter_mut().zip(dlogits) {
                    *r += d;
                }
            }
            (PolicyParams::Mlp(m), FwdCache::Mlp(cache), Grad::Dense(g)) => {
                m.backward_logits(cache, dlogits, g);
            }
            _ => panic!("forward cache, params and gradient kind must agree"),
        }
    }

    /// Gradient container of the right shape, filled with zeros.
    pub fn zero_grad(&self) -> Grad {
        match &self.inner.params {
            PolicyParams::Tabular(_) => Grad::sparse(),
            PolicyParams::Mlp(m) => Grad::dense(m.n_params()),
        }
    }

    /// Temperature-1 log-probabilities (log softmax of the logits).
    pub fn log_probs(&self, state: &TokenMdpState) -> Vec<f64> {
        log_softmax(&self.inner.params.logits(&self.ctx(state)))
    }

    pub fn log_prob(&self, state: &TokenMdpState, action: u32) -> f64 {
        self.log_probs(state)[action as usize]
    }

    /// Sampling distribution softmax(logits / temperature).
    pub fn action_probs(&self, state: &TokenMdpState, temperature: f64) -> Result<Vec<f64>> {
        if !(temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        Ok(softmax_with_temperature(
            &self.inner.params.logits(&self.ctx(state)),
            temperature,
        ))
    }

    /// Draws one action from softmax(logits / temperature).
    pub fn sample_action(
        &self,
        state: &TokenMdpState,
        temperature: f64,
        rng: &mut impl Rng,
    ) -> Result<u32> {
        if state.is_terminal() {
            return Err(Error::Contract("sampling from a terminal state".into()));
        }
        let probs = self.action_probs(state, temperature)?;
        Ok(sample_index(&probs, rng) as u32)
    }

    /// The zero-temperature limit: highest logit wins, ties broken toward
    /// the lowest token id.
    pub fn greedy_action(&self, state: &TokenMdpState) -> Result<u32> {
        let logits = self.logits(state)?;
        let mut best = 0usize;
        for (i, &l) in logits.iter().enumerate() {
            if l > logits[best] {
                best = i;
            }
        }
        Ok(best as u32)
    }

    /// Gradient of `log_prob(state, action)` with respect to every
    /// parameter. For the tabular policy this is `onehot(action) - softmax`
    /// on the context's row and zero elsewhere; for the MLP the same logit
    /// gradient is backpropagated through the network.
    pub fn grad_log_prob(&self, state: &TokenMdpState, action: u32) -> Grad {
        let mut g = self.zero_grad();
        self.accumulate_grad_log_prob(state, action, 1.0, &mut g);
        g
    }

    /// `grad += coeff * d(log_prob)/d(params)`; the workhorse behind every
    /// loss in this crate.
    pub fn accumulate_grad_log_prob(
        &self,
        state: &TokenMdpState,
        action: u32,
        coeff: f64,
        grad: &mut Grad,
    ) {
        let fwd = self.forward(state);
        let probs = softmax_with_temperature(&fwd.logits, 1.0);
        let mut dlogits = probs;
        for d in dlogits.iter_mut() {
            *d = -coeff * *d;
        }
        dlogits[action as usize] += coeff;
        self.backward_logits(&fwd, &dlogits, grad);
    }
}

/// Unbiased per-sample KL estimator `r - log r - 1`, with
/// `r = pi_ref(a|s) / pi(a|s)`. Computed via expm1 of the log-ratio and
/// floored at zero, which the exact quantity never goes below.
pub fn kl_hat(
    policy: &PolicySnapshot,
    reference: &PolicySnapshot,
    state: &TokenMdpState,
    action: u32,
) -> f64 {
    debug_assert_eq!(policy.vocab(), reference.vocab());
    let d = reference.log_prob(state, action) - policy.log_prob(state, action);
    (d.exp_m1() - d).max(0.0)
}

/// Exact KL(pi || pi_ref) at one state by summation over the vocabulary.
/// This, not the sampled estimator, is what metric curves report.
pub fn exact_kl(
    policy: &PolicySnapshot,
    reference: &PolicySnapshot,
    state: &TokenMdpState,
) -> f64 {
    debug_assert_eq!(policy.vocab(), reference.vocab());
    let lp = policy.log_probs(state);
    let lq = reference.log_probs(state);
    lp.iter()
        .zip(&lq)
        .map(|(&a, &b)| (a.exp()) * (a - b))
        .sum()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&l| (l - m).exp()).sum::<f64>().ln() + m;
    logits.iter().map(|&l| l - lse).collect()
}

pub fn softmax_with_temperature(logits: &[f64], temperature: f64) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits
        .iter()
        .map(|&l| ((l - m) / temperature).exp())
        .collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= z);
    out
}

pub fn entropy(probs: &[f64]) -> f64 {
    probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum()
}

fn sample_index(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}
