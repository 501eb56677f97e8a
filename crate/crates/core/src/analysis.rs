//! Value-prediction quality analysis and training-efficiency curves.
//!
//! Ground truth for a state is the exact enumeration oracle when the tree
//! fits the leaf budget, otherwise a 256-rollout Monte-Carlo estimate.
//! Against it the module scores any value predictor by mean absolute
//! error, by the fraction of predictions within 0.05 of the truth, by
//! 5-way top-action identification (does the predictor's argmax over five
//! sampled next steps match the ground-truth argmax), and by an error
//! profile over normalized step positions. Training metrics feed
//! accuracy-vs-KL curves with linear interpolation onto a shared KL grid.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::advantage::StepSegmentation;
use crate::env::{Env, TaskInstance, TokenMdpState, Trajectory};
use crate::error::{Error, Result};
use crate::metrics::IterationMetrics;
use crate::policy::PolicySnapshot;
use crate::value::{self, EstimateMethod, ValueNet};

/// Rollout count for the Monte-Carlo ground-truth fallback.
pub const GROUND_TRUTH_MC_K: u32 = 256;
/// Candidates per top-action trial.
pub const TOP_ACTION_CANDIDATES: usize = 5;
/// Ground-truth values within this band of the maximum count as tied; any
/// tied pick is correct (MC ground truth has finite precision).
pub const DEFAULT_TIE_BAND: f64 = 0.01;
/// Threshold for the value "classification" accuracy.
pub const VALUE_ACCURACY_THRESHOLD: f64 = 0.05;
/// Resampling attempts before a trial accepts duplicate candidates.
const CANDIDATE_RETRY_LIMIT: usize = 20;

/// One audited step-boundary state: predicted vs ground-truth value.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValueAuditRecord {
    pub iteration: u64,
    /// Predictor that produced `predicted` (net or mc).
    pub method: EstimateMethod,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<u32>,
    /// Index of the trajectory within the audited batch.
    pub trajectory: usize,
    pub step_index: usize,
    pub num_steps: usize,
    pub state_id: u64,
    pub predicted: f64,
    pub ground_truth: f64,
    pub ground_truth_method: EstimateMethod,
    pub seed: u64,
}

/// One 5-way top-action trial.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TopActionRecord {
    pub iteration: u64,
    pub method: EstimateMethod,
    pub state_id: u64,
    /// r_step + ground-truth value of the resulting state, per candidate.
    pub candidate_truths: Vec<f64>,
    pub candidate_predictions: Vec<f64>,
    pub correct: bool,
    /// All candidates tied within the band (trivially correct).
    pub degenerate: bool,
}

/// Exact value when the oracle budget allows, else the mean of 256
/// Monte-Carlo rollouts; tagged with the path taken.
pub fn ground_truth_value(
    env: &Env,
    policy: &PolicySnapshot,
    task: &TaskInstance,
    state: &TokenMdpState,
    temperature: f64,
    leaf_budget: u64,
    seed: u64,
) -> Result<(f64, EstimateMethod)> {
    match value::exact_value_stats(env, policy, task, state, temperature, leaf_budget) {
        Ok(stats) => Ok((stats.value, EstimateMethod::Exact)),
        Err(Error::OracleUnavailable(_)) => {
            let mut rng = crate::rng::stream(seed, &[0x67]);
            let est = value::mc_value(
                env,
                policy,
                task,
                state,
                GROUND_TRUTH_MC_K,
                temperature,
                &mut rng,
            )?;
            Ok((est.value, EstimateMethod::Mc))
        }
        Err(e) => Err(e),
    }
}

/// A state-value predictor under audit.
pub trait ValueEstimator: Sync {
    fn method(&self) -> EstimateMethod;
    fn k(&self) -> Option<u32> {
        None
    }
    /// Estimate V(state); `seed` feeds stochastic estimators so audits are
    /// reproducible and scheduling-independent.
    fn estimate(
        &self,
        env: &Env,
        policy: &PolicySnapshot,
        task: &TaskInstance,
        state: &TokenMdpState,
        seed: u64,
    ) -> Result<f64>;
}

/// Critic predictions.
pub struct NetEstimator<'a> {
    pub net: &'a ValueNet,
}

impl ValueEstimator for NetEstimator<'_> {
    fn method(&self) -> EstimateMethod {
        EstimateMethod::Net
    }

    fn estimate(
        &self,
        _env: &Env,
        _policy: &PolicySnapshot,
        _task: &TaskInstance,
        state: &TokenMdpState,
        _seed: u64,
    ) -> Result<f64> {
        Ok(self.net.predict(state))
    }
}

/// K-rollout Monte-Carlo predictions under the given policy/temperature.
pub struct McEstimator {
    pub k: u32,
    pub temperature: f64,
}

impl ValueEstimator for McEstimator {
    fn method(&self) -> EstimateMethod {
        EstimateMethod::Mc
    }

    fn k(&self) -> Option<u32> {
        Some(self.k)
    }

    fn estimate(
        &self,
        env: &Env,
        policy: &PolicySnapshot,
        task: &TaskInstance,
        state: &TokenMdpState,
        seed: u64,
    ) -> Result<f64> {
        let mut rng = crate::rng::stream(seed, &[0x3c]);
        Ok(value::mc_value(env, policy, task, state, self.k, self.temperature, &mut rng)?.value)
    }
}

/// Audits every step boundary of every trajectory exactly once: records the
/// estimator's prediction and the ground truth under the current policy.
#[allow(clippy::too_many_arguments)]
pub fn audit_value_predictions(
    env: &Env,
    policy: &PolicySnapshot,
    estimator: &dyn ValueEstimator,
    trajs: &[Trajectory],
    segs: &[StepSegmentation],
    temperature: f64,
    leaf_budget: u64,
    iteration: u64,
    seed: u64,
) -> Result<Vec<ValueAuditRecord>> {
    assert_eq!(trajs.len(), segs.len());
    let jobs: Vec<(usize, usize, usize, TokenMdpState, usize)> = trajs
        .iter()
        .zip(segs)
        .enumerate()
        .flat_map(|(ti, (traj, seg))| {
            let states = traj.states(env);
            let num_steps = seg.num_steps();
            seg.boundaries()
                .enumerate()
                .map(move |(si, b)| (ti, si, num_steps, states[b].clone(), b))
                .collect::<Vec<_>>()
        })
        .collect();
    jobs.into_par_iter()
        .map(|(ti, si, num_steps, state, _b)| {
            let rec_seed = crate::rng::stream(seed, &[ti as u64, si as u64])
                .gen::<u64>();
            let predicted = estimator.estimate(env, policy, &trajs[ti].task, &state, rec_seed)?;
            let (ground_truth, ground_truth_method) = ground_truth_value(
                env,
                policy,
                &trajs[ti].task,
                &state,
                temperature,
                leaf_budget,
                rec_seed ^ 0x5eed,
            )?;
            Ok(ValueAuditRecord {
                iteration,
                method: estimator.method(),
                k: estimator.k(),
                trajectory: ti,
                step_index: si,
                num_steps,
                state_id: state.state_id(),
                predicted,
                ground_truth,
                ground_truth_method,
                seed: rec_seed,
            })
        })
        .collect()
}

fn reported(pred: f64) -> f64 {
    // predictions are clamped into [0, 1] for reporting only
    pred.clamp(0.0, 1.0)
}

/// Mean absolute error of (clamped) predictions against ground truth.
pub fn value_mae(records: &[ValueAuditRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Contract("value_mae over no records".into()));
    }
    Ok(records
        .iter()
        .map(|r| (reported(r.predicted) - r.ground_truth).abs())
        .sum::<f64>()
        / records.len() as f64)
}

/// Fraction of predictions within `threshold` of the truth (inclusive).
pub fn value_accuracy(records: &[ValueAuditRecord], threshold: f64) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Contract("value_accuracy over no records".into()));
    }
    let hits = records
        .iter()
        .filter(|r| (reported(r.predicted) - r.ground_truth).abs() <= threshold)
        .count();
    Ok(hits as f64 / records.len() as f64)
}

struct Candidate {
    actions: Vec<u32>,
    reward: f64,
    end: TokenMdpState,
}

fn sample_candidate_step(
    env: &Env,
    policy: &PolicySnapshot,
    task: &TaskInstance,
    state: &TokenMdpState,
    temperature: f64,
    rng: &mut impl Rng,
) -> Result<Candidate> {
    let mut cur = state.clone();
    let mut actions = Vec::new();
    let mut reward = 0.0;
    loop {
        let action = policy.sample_action(&cur, temperature, rng)?;
        let (next, r) = env.step(&cur, action, task)?;
        actions.push(action);
        reward += r;
        cur = next;
        if action == env.vocab.sep() || cur.is_terminal() {
            return Ok(Candidate {
                actions,
                reward,
                end: cur,
            });
        }
    }
}

/// Samples five candidate next steps (SEP-terminated, or episode-ending)
/// from `state`, scores the resulting states with the estimator and with
/// ground truth, and checks whether the estimator's argmax lands in the
/// ground-truth tie set. Duplicate candidates are resampled up to a retry
/// limit, then allowed.
#[allow(clippy::too_many_arguments)]
pub fn top_action_trial(
    env: &Env,
    policy: &PolicySnapshot,
    estimator: &dyn ValueEstimator,
    task: &TaskInstance,
    state: &TokenMdpState,
    temperature: f64,
    leaf_budget: u64,
    iteration: u64,
    seed: u64,
) -> Result<TopActionRecord> {
    if state.is_terminal() {
        return Err(Error::Contract("top-action trial from a terminal state".into()));
    }
    let mut rng = crate::rng::stream(seed, &[0xace]);
    let mut candidates: Vec<Candidate> = Vec::with_capacity(TOP_ACTION_CANDIDATES);
    let mut attempts = 0usize;
    while candidates.len() < TOP_ACTION_CANDIDATES {
        let cand = sample_candidate_step(env, policy, task, state, temperature, &mut rng)?;
        let dup = candidates.iter().any(|c| c.actions == cand.actions);
        if !dup || attempts >= CANDIDATE_RETRY_LIMIT {
            candidates.push(cand);
        } else {
            attempts += 1;
        }
    }

    let mut truths = Vec::with_capacity(TOP_ACTION_CANDIDATES);
    let mut preds = Vec::with_capacity(TOP_ACTION_CANDIDATES);
    for (i, cand) in candidates.iter().enumerate() {
        let cand_seed = crate::rng::stream(seed, &[0xbeef, i as u64]).gen::<u64>();
        let (truth_tail, pred_tail) = if cand.end.is_terminal() {
            (0.0, 0.0)
        } else {
            let (t, _) = ground_truth_value(
                env,
                policy,
                task,
                &cand.end,
                temperature,
                leaf_budget,
                cand_seed,
            )?;
            let p = estimator.estimate(env, policy, task, &cand.end, cand_seed ^ 0x11)?;
            (t, p)
        };
        truths.push(cand.reward + truth_tail);
        preds.push(cand.reward + pred_tail);
    }

    let best_truth = truths.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let tie_set: Vec<usize> = (0..truths.len())
        .filter(|&i| truths[i] >= best_truth - DEFAULT_TIE_BAND)
        .collect();
    let argmax_pred = (0..preds.len())
        .max_by(|&a, &b| preds[a].partial_cmp(&preds[b]).unwrap())
        .unwrap();
    let correct = tie_set.contains(&argmax_pred);
    let degenerate = tie_set.len() == TOP_ACTION_CANDIDATES;

    Ok(TopActionRecord {
        iteration,
        method: estimator.method(),
        state_id: state.state_id(),
        candidate_truths: truths,
        candidate_predictions: preds,
        correct,
        degenerate,
    })
}

/// Fraction of correct trials.
pub fn top_action_accuracy(records: &[TopActionRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Contract("top_action_accuracy over no records".into()));
    }
    Ok(records.iter().filter(|r| r.correct).count() as f64 / records.len() as f64)
}

/// Chance-level calibration: replaces each trial's predictions with iid
/// uniform scores and rescores. Restricted to trials whose ground-truth
/// argmax is unique (no tie within the band), where chance is exactly 1/5.
/// Returns (accuracy, trials_used).
pub fn random_guess_top_action_accuracy(
    records: &[TopActionRecord],
    seed: u64,
) -> (f64, usize) {
    let mut rng = crate::rng::stream(seed, &[0x9a9a]);
    let mut used = 0usize;
    let mut hits = 0usize;
    for rec in records {
        let best = rec
            .candidate_truths
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let tie_set: Vec<usize> = (0..rec.candidate_truths.len())
            .filter(|&i| rec.candidate_truths[i] >= best - DEFAULT_TIE_BAND)
            .collect();
        if tie_set.len() != 1 {
            continue;
        }
        used += 1;
        let scores: Vec<f64> = (0..rec.candidate_truths.len())
            .map(|_| rng.gen::<f64>())
            .collect();
        let pick = (0..scores.len())
            .max_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap())
            .unwrap();
        if tie_set.contains(&pick) {
            hits += 1;
        }
    }
    let acc = if used == 0 { 0.0 } else { hits as f64 / used as f64 };
    (acc, used)
}

/// MAE bucketed by normalized step position (deciles of
/// step_index / num_steps).
#[derive(Debug, Clone, Serialize)]
pub struct PositionBucket {
    pub decile: usize,
    pub mae: f64,
    pub count: usize,
}

pub fn error_by_step_position(records: &[ValueAuditRecord]) -> Result<Vec<PositionBucket>> {
    if records.is_empty() {
        return Err(Error::Contract("error profile over no records".into()));
    }
    let mut sums = [0.0f64; 10];
    let mut counts = [0usize; 10];
    for r in records {
        debug_assert!(r.step_index < r.num_steps);
        let d = ((10 * r.step_index) / r.num_steps.max(1)).min(9);
        sums[d] += (reported(r.predicted) - r.ground_truth).abs();
        counts[d] += 1;
    }
    Ok((0..10)
        .filter(|&d| counts[d] > 0)
        .map(|d| PositionBucket {
            decile: d,
            mae: sums[d] / counts[d] as f64,
            count: counts[d],
        })
        .collect())
}

/// (exact KL, sampled test accuracy) per iteration, in iteration order.
pub fn accuracy_vs_kl_curve(metrics: &[IterationMetrics]) -> Result<Vec<(f64, f64)>> {
    if metrics.is_empty() {
        return Err(Error::Contract("accuracy_vs_kl_curve over no metrics".into()));
    }
    let mut sorted: Vec<&IterationMetrics> = metrics.iter().collect();
    sorted.sort_by_key(|m| m.iteration);
    Ok(sorted.iter().map(|m| (m.exact_kl, m.test_acc)).collect())
}

/// Forces the KL coordinate non-decreasing by running maximum. Returns the
/// adjusted series and whether the input was already monotone (violations
/// are flagged, not asserted).
pub fn monotone_kl(series: &[(f64, f64)]) -> (Vec<(f64, f64)>, bool) {
    let mut out = Vec::with_capacity(series.len());
    let mut max_kl = f64::NEG_INFINITY;
    let mut monotone = true;
    for &(kl, acc) in series {
        if kl < max_kl {
            monotone = false;
        }
        max_kl = max_kl.max(kl);
        out.push((max_kl, acc));
    }
    (out, monotone)
}

/// Linear interpolation of accuracy at a KL point; the series must be
/// monotone in KL and bracket `x`.
pub fn interp_accuracy(series: &[(f64, f64)], x: f64) -> Option<f64> {
    if series.is_empty() || x < series[0].0 || x > series[series.len() - 1].0 {
        return None;
    }
    let mut prev = series[0];
    for &(kl, acc) in series {
        if kl >= x {
            if kl == prev.0 {
                return Some(acc);
            }
            let w = (x - prev.0) / (kl - prev.0);
            return Some(prev.1 + w * (acc - prev.1));
        }
        prev = (kl, acc);
    }
    Some(series[series.len() - 1].1)
}

/// Evenly spaced grid over the KL range both series cover.
pub fn shared_kl_grid(a: &[(f64, f64)], b: &[(f64, f64)], points: usize) -> Vec<f64> {
    let lo = a[0].0.max(b[0].0);
    let hi = a[a.len() - 1].0.min(b[b.len() - 1].0);
    if hi <= lo || points < 2 {
        return vec![lo];
    }
    (0..points)
        .map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64)
        .collect()
}

fn write_csv(path: &std::path::Path, header: &str, rows: &[String]) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{header}")?;
    for row in rows {
        writeln!(f, "{row}")?;
    }
    Ok(())
}

/// Per-iteration MAE table (scatter summary analogue).
pub fn write_fig8_csv(path: &std::path::Path, records: &[ValueAuditRecord]) -> Result<()> {
    let rows = group_by_iteration(records)
        .into_iter()
        .map(|(iter, recs)| {
            let mae = value_mae(&recs).unwrap_or(f64::NAN);
            format!("{iter},{},{mae},{}", method_name(recs[0].method), recs.len())
        })
        .collect::<Vec<_>>();
    write_csv(path, "iteration,method,mae,n", &rows)
}

/// Error-vs-position profile table.
pub fn write_fig10_csv(path: &std::path::Path, records: &[ValueAuditRecord]) -> Result<()> {
    let buckets = error_by_step_position(records)?;
    let method = method_name(records[0].method);
    let rows = buckets
        .iter()
        .map(|b| format!("{},{},{},{}", b.decile, method, b.mae, b.count))
        .collect::<Vec<_>>();
    write_csv(path, "decile,method,mae,n", &rows)
}

/// Per-iteration 0.05-threshold accuracy table.
pub fn write_fig11a_csv(path: &std::path::Path, records: &[ValueAuditRecord]) -> Result<()> {
    let rows = group_by_iteration(records)
        .into_iter()
        .map(|(iter, recs)| {
            let acc = value_accuracy(&recs, VALUE_ACCURACY_THRESHOLD).unwrap_or(f64::NAN);
            format!("{iter},{},{acc},{}", method_name(recs[0].method), recs.len())
        })
        .collect::<Vec<_>>();
    write_csv(path, "iteration,method,accuracy,n", &rows)
}

/// Per-iteration top-action accuracy table.
pub fn write_fig11b_csv(path: &std::path::Path, records: &[TopActionRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Contract("no top-action records".into()));
    }
    let mut by_iter: std::collections::BTreeMap<u64, Vec<&TopActionRecord>> = Default::default();
    for r in records {
        by_iter.entry(r.iteration).or_default().push(r);
    }
    let rows = by_iter
        .into_iter()
        .map(|(iter, recs)| {
            let acc = recs.iter().filter(|r| r.correct).count() as f64 / recs.len() as f64;
            format!("{iter},{},{acc},{}", method_name(recs[0].method), recs.len())
        })
        .collect::<Vec<_>>();
    write_csv(path, "iteration,method,accuracy,n_trials", &rows)
}

/// Accuracy-vs-KL table.
pub fn write_fig6_csv(path: &std::path::Path, metrics: &[IterationMetrics]) -> Result<()> {
    let curve = accuracy_vs_kl_curve(metrics)?;
    let rows = curve
        .iter()
        .zip(metrics)
        .map(|((kl, acc), m)| format!("{},{kl},{acc}", m.iteration))
        .collect::<Vec<_>>();
    write_csv(path, "iteration,kl,accuracy", &rows)
}

fn method_name(m: EstimateMethod) -> &'static str {
    match m {
        EstimateMethod::Net => "net",
        EstimateMethod::Mc => "mc",
        EstimateMethod::Exact => "exact",
    }
}

fn group_by_iteration(records: &[ValueAuditRecord]) -> Vec<(u64, Vec<ValueAuditRecord>)> {
    let mut by_iter: std::collections::BTreeMap<u64, Vec<ValueAuditRecord>> = Default::default();
    for r in records {
        by_iter.entry(r.iteration).or_default().push(r.clone());
    }
    by_iter.into_iter().collect()
}
