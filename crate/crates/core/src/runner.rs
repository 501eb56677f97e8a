//! Run orchestration: directories, manifests, persistence, resume, and the
//! post-hoc compare / analyze / replay operations.
//!
//! One run directory per (config, seed):
//!
//! ```text
//! <out>/seed_<N>/
//!   manifest.json        resolved config + seed + code version + host fingerprint
//!   config.toml          resolved config, written before execution
//!   tasks/{train,val,test}.txt
//!   pi_ref.ckpt          reference policy (shared across algorithms and seeds)
//!   sft_report.json      pretraining losses and baseline accuracies
//!   metrics.jsonl        deterministic per-iteration metrics
//!   timings.jsonl        wall-clock sidecar
//!   value_audit.jsonl    value-prediction audits
//!   topaction_audit.jsonl
//!   advantages.jsonl     advantage dumps at audited iterations
//!   checkpoints/latest.ckpt   full run state (crash-safe resume)
//!   checkpoints/best.ckpt     best-validation policy
//!   checkpoints/final.ckpt    final policy
//!   summary.json
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{
    load_policy, load_run_state, save_policy, save_run_state, PolicyCheckpoint,
};
use crate::config::{Algorithm, ExperimentConfig};
use crate::env::{Env, Vocab};
use crate::error::{Error, Result};
use crate::metrics::{append_jsonl, read_jsonl, IterationMetrics, TimingRecord};
use crate::policy::{Policy, PolicySnapshot};
use crate::trainers::{
    dpo_train, restem_train, run_ppo, sft_pretrain, PpoOutcome, RunEvent, TaskSets, ValueSource,
};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Fingerprint {
    pub os: String,
    pub arch: String,
    pub cpus: usize,
}

impl Fingerprint {
    pub fn capture() -> Self {
        Self {
            os: std::env::consts::OS.to_string(),
            arch: std::env::consts::ARCH.to_string(),
            cpus: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub code_version: String,
    pub algorithm: String,
    pub seed: u64,
    pub fingerprint: Fingerprint,
    pub config: ExperimentConfig,
}

/// End-of-run digest, also written as `summary.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub algorithm: String,
    pub iterations: u64,
    pub gradient_steps: u64,
    pub rollout_tokens: u64,
    pub final_test_acc: f64,
    pub final_test_acc_greedy: f64,
    pub best_val_acc: f64,
    pub best_iteration: Option<u64>,
    pub sft_test_acc: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SftRunReport {
    pub epoch_losses: Vec<f64>,
    pub val_greedy_acc: f64,
    pub test_acc_sampled: f64,
    pub test_acc_greedy: f64,
}

/// Pretrained reference plus its baseline report, cached beside the seed
/// directories.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct SftCacheEntry {
    checkpoint: PolicyCheckpoint,
    report: SftRunReport,
}

pub fn seed_dir(out_dir: &Path, seed: u64) -> PathBuf {
    out_dir.join(format!("seed_{seed}"))
}

/// Configures the global worker pool. `workers = 0` keeps one thread per
/// core; results do not depend on the choice, only wall time does.
pub fn init_worker_pool(workers: usize) {
    if workers > 0 {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global();
    }
}

/// Runs every configured seed (or just `only_seed`) under `out_dir`.
pub fn execute(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    only_seed: Option<u64>,
    resume: bool,
) -> Result<Vec<SeedSummary>> {
    cfg.validate()?;
    let seeds: Vec<u64> = match only_seed {
        Some(s) => vec![s],
        None => cfg.run.seeds.clone(),
    };
    let mut summaries = Vec::new();
    for seed in seeds {
        summaries.push(execute_seed(cfg, &seed_dir(out_dir, seed), seed, resume)?);
    }
    Ok(summaries)
}

/// Derives the reference policy deterministically from the data seed (not
/// the run seed), so every algorithm and every run seed starts from the
/// same pretrained checkpoint.
pub fn reference_policy(
    cfg: &ExperimentConfig,
    env: &Env,
    vocab: &Vocab,
    tasks: &TaskSets,
) -> Result<(Policy, crate::trainers::SftReport)> {
    let init = Policy::new(*vocab, cfg.policy, cfg.tasks.seed)?;
    sft_pretrain(init, env, &tasks.train, &tasks.val, &cfg.sft, cfg.tasks.seed)
}

struct RunFiles {
    metrics: PathBuf,
    timings: PathBuf,
    value_audit: PathBuf,
    topaction_audit: PathBuf,
    advantages: PathBuf,
    latest: PathBuf,
    best: PathBuf,
    final_ckpt: PathBuf,
}

impl RunFiles {
    fn new(dir: &Path) -> Self {
        let ckpts = dir.join("checkpoints");
        Self {
            metrics: dir.join("metrics.jsonl"),
            timings: dir.join("timings.jsonl"),
            value_audit: dir.join("value_audit.jsonl"),
            topaction_audit: dir.join("topaction_audit.jsonl"),
            advantages: dir.join("advantages.jsonl"),
            latest: ckpts.join("latest.ckpt"),
            best: ckpts.join("best.ckpt"),
            final_ckpt: ckpts.join("final.ckpt"),
        }
    }

    fn truncate_logs(&self) -> Result<()> {
        for p in [
            &self.metrics,
            &self.timings,
            &self.value_audit,
            &self.topaction_audit,
            &self.advantages,
        ] {
            std::fs::File::create(p)?;
        }
        Ok(())
    }
}

pub fn execute_seed(
    cfg: &ExperimentConfig,
    dir: &Path,
    seed: u64,
    resume: bool,
) -> Result<SeedSummary> {
    std::fs::create_dir_all(dir.join("checkpoints"))?;
    std::fs::create_dir_all(dir.join("tasks"))?;
    let files = RunFiles::new(dir);

    let config_path = dir.join("config.toml");
    let resolved = cfg.to_toml_string();
    if resume {
        let existing = std::fs::read_to_string(&config_path)
            .map_err(|_| Error::Config("resume requires an existing run directory".into()))?;
        if existing != resolved {
            return Err(Error::Config(
                "resume config does not match the one recorded in the run directory".into(),
            ));
        }
        if !matches!(cfg.algorithm, Algorithm::Ppo | Algorithm::Vineppo) {
            return Err(Error::Config(format!(
                "resume is supported for the ppo/vineppo loop, not {}",
                cfg.algorithm.name()
            )));
        }
    } else {
        std::fs::write(&config_path, &resolved)?;
        files.truncate_logs()?;
    }

    let manifest = Manifest {
        version: MANIFEST_VERSION,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        algorithm: cfg.algorithm.name().to_string(),
        seed,
        fingerprint: Fingerprint::capture(),
        config: cfg.clone(),
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Artifact(format!("manifest: {e}")))?,
    )?;

    let (env, vocab) = cfg.env.build()?;
    let tasks = cfg.build_task_sets(&vocab)?;
    crate::env::write_tasks_file(&dir.join("tasks/train.txt"), &tasks.train)?;
    crate::env::write_tasks_file(&dir.join("tasks/val.txt"), &tasks.val)?;
    crate::env::write_tasks_file(&dir.join("tasks/test.txt"), &tasks.test)?;

    // Reference policy: load if pinned, else pretrain. The result depends
    // only on the env/policy/tasks/sft sections, so sibling seed runs share
    // one cached copy.
    let (reference, sft_report) = match &cfg.run.init_checkpoint {
        Some(path) => {
            let ckpt = load_policy(path)?;
            let report = SftRunReport {
                epoch_losses: Vec::new(),
                val_greedy_acc: f64::NAN,
                test_acc_sampled: f64::NAN,
                test_acc_greedy: f64::NAN,
            };
            (ckpt.policy().snapshot(), report)
        }
        None => {
            let cache_key = {
                let fingerprint = serde_json::to_string(&(
                    &cfg.env,
                    &cfg.policy,
                    &cfg.tasks,
                    &cfg.sft,
                    &cfg.ppo.eval_temperature,
                    &cfg.ppo.eval_rounds,
                ))
                .expect("sections serialize");
                crate::rng::fnv1a_tokens(fingerprint.bytes().map(|b| b as u32))
            };
            let cache_path = dir
                .parent()
                .map(|p| p.join(format!("pi_ref_{cache_key:016x}.json")));
            let cached: Option<SftCacheEntry> = cache_path
                .as_ref()
                .filter(|p| p.exists())
                .and_then(|p| {
                    std::fs::read_to_string(p)
                        .ok()
                        .and_then(|s| serde_json::from_str(&s).ok())
                });
            let entry = match cached {
                Some(entry) => entry,
                None => {
                    let (policy, report) = reference_policy(cfg, &env, &vocab, &tasks)?;
                    let snap = policy.snapshot();
                    let eval_seed = cfg.tasks.seed ^ 0x5f7e;
                    let test_acc_sampled = crate::trainers::sampled_accuracy(
                        &env,
                        &snap,
                        &tasks.test,
                        cfg.ppo.eval_temperature,
                        cfg.ppo.eval_rounds,
                        eval_seed,
                    )?;
                    let test_acc_greedy =
                        crate::trainers::greedy_accuracy(&env, &snap, &tasks.test)?;
                    let rng = crate::rng::stream(cfg.tasks.seed, &[0x9ef]);
                    let entry = SftCacheEntry {
                        checkpoint: PolicyCheckpoint::new(&policy, &rng),
                        report: SftRunReport {
                            epoch_losses: report.epoch_losses,
                            val_greedy_acc: report.heldout_greedy_acc,
                            test_acc_sampled,
                            test_acc_greedy,
                        },
                    };
                    if let Some(p) = &cache_path {
                        let tmp = p.with_extension("tmp");
                        std::fs::write(
                            &tmp,
                            serde_json::to_string(&entry)
                                .map_err(|e| Error::Artifact(format!("pi_ref cache: {e}")))?,
                        )?;
                        std::fs::rename(&tmp, p)?;
                    }
                    entry
                }
            };
            save_policy(&dir.join("pi_ref.ckpt"), &entry.checkpoint)?;
            (entry.checkpoint.policy().snapshot(), entry.report)
        }
    };
    std::fs::write(
        dir.join("sft_report.json"),
        serde_json::to_string_pretty(&sft_report)
            .map_err(|e| Error::Artifact(format!("sft report: {e}")))?,
    )?;

    if matches!(cfg.algorithm, Algorithm::Sft) {
        let reference_policy = Policy::from_snapshot(&reference);
        let rng = crate::rng::stream(cfg.tasks.seed, &[0x9ef]);
        let ckpt = PolicyCheckpoint::new(&reference_policy, &rng);
        save_policy(&files.final_ckpt, &ckpt)?;
        save_policy(&files.best, &ckpt)?;
        let summary = SeedSummary {
            seed,
            algorithm: manifest.algorithm.clone(),
            iterations: 0,
            gradient_steps: 0,
            rollout_tokens: 0,
            final_test_acc: sft_report.test_acc_sampled,
            final_test_acc_greedy: sft_report.test_acc_greedy,
            best_val_acc: sft_report.val_greedy_acc,
            best_iteration: None,
            sft_test_acc: sft_report.test_acc_sampled,
        };
        std::fs::write(
            dir.join("summary.json"),
            serde_json::to_string_pretty(&summary)
                .map_err(|e| Error::Artifact(format!("summary: {e}")))?,
        )?;
        return Ok(summary);
    }

    let resume_state = if resume {
        Some(load_run_state(&files.latest)?)
    } else {
        None
    };

    let mut observer = |event: RunEvent<'_>| -> Result<()> {
        match event {
            RunEvent::Iteration {
                metrics,
                wall_ms,
                state,
                improved_best,
            } => {
                append_jsonl(&files.metrics, metrics)?;
                append_jsonl(
                    &files.timings,
                    &TimingRecord {
                        iteration: metrics.iteration,
                        wall_ms,
                    },
                )?;
                save_run_state(&files.latest, state)?;
                if improved_best {
                    let policy = state.policy.policy();
                    let rng = state.policy.rng.restore();
                    save_policy(&files.best, &PolicyCheckpoint::new(&policy, &rng))?;
                }
                Ok(())
            }
            RunEvent::Audit {
                values,
                trials,
                advantages,
                ..
            } => {
                for v in values {
                    append_jsonl(&files.value_audit, v)?;
                }
                for t in trials {
                    append_jsonl(&files.topaction_audit, t)?;
                }
                for a in advantages {
                    append_jsonl(&files.advantages, a)?;
                }
                Ok(())
            }
        }
    };

    let outcome: PpoOutcome = match cfg.algorithm {
        Algorithm::Ppo => run_ppo(
            &env,
            &tasks,
            &reference,
            &cfg.ppo,
            ValueSource::ValueNet,
            seed,
            resume_state,
            &mut observer,
        )?,
        Algorithm::Vineppo => run_ppo(
            &env,
            &tasks,
            &reference,
            &cfg.ppo,
            ValueSource::McRollouts,
            seed,
            resume_state,
            &mut observer,
        )?,
        Algorithm::Restem => restem_train(&env, &tasks, &reference, &cfg.restem, seed, &mut observer)?,
        Algorithm::DpoPositive => {
            dpo_train(&env, &tasks, &reference, &cfg.dpo, seed, &mut observer)?
        }
        Algorithm::Sft => unreachable!("handled above"),
    };

    let final_policy = Policy::from_snapshot(&outcome.final_policy);
    let rng = crate::rng::stream(seed, &[0xf17a1]);
    save_policy(&files.final_ckpt, &PolicyCheckpoint::new(&final_policy, &rng))?;
    if !files.best.exists() {
        // no iteration improved on the resumed baseline; keep final as best
        save_policy(&files.best, &PolicyCheckpoint::new(&final_policy, &rng))?;
    }

    let last = outcome.metrics.last();
    let summary = SeedSummary {
        seed,
        algorithm: manifest.algorithm.clone(),
        iterations: last.map(|m| m.iteration + 1).unwrap_or(0),
        gradient_steps: outcome.gradient_steps,
        rollout_tokens: outcome.rollout_tokens,
        final_test_acc: last.map(|m| m.test_acc).unwrap_or(f64::NAN),
        final_test_acc_greedy: last.map(|m| m.test_acc_greedy).unwrap_or(f64::NAN),
        best_val_acc: outcome.best_val_acc,
        best_iteration: outcome.best_iteration,
        sft_test_acc: sft_report.test_acc_sampled,
    };
    std::fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)
            .map_err(|e| Error::Artifact(format!("summary: {e}")))?,
    )?;
    Ok(summary)
}

/// A loaded seed run (manifest + metric log).
pub struct LoadedRun {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub metrics: Vec<IterationMetrics>,
}

/// Loads `dir` if it is a seed run, or its `seed_*` children.
pub fn load_runs(dir: &Path) -> Result<Vec<LoadedRun>> {
    if !dir.exists() {
        return Err(Error::Artifact(format!(
            "run directory {} does not exist",
            dir.display()
        )));
    }
    if dir.join("manifest.json").exists() {
        return Ok(vec![load_single_run(dir)?]);
    }
    let mut children: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.is_dir()
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .map(|n| n.starts_with("seed_"))
                    .unwrap_or(false)
        })
        .collect();
    children.sort();
    if children.is_empty() {
        return Err(Error::Artifact(format!(
            "{} holds neither a manifest.json nor seed_* run directories",
            dir.display()
        )));
    }
    children.iter().map(|p| load_single_run(p)).collect()
}

fn load_single_run(dir: &Path) -> Result<LoadedRun> {
    let manifest: Manifest = serde_json::from_str(
        &std::fs::read_to_string(dir.join("manifest.json"))
            .map_err(|e| Error::Artifact(format!("{}: {e}", dir.display())))?,
    )
    .map_err(|e| Error::Artifact(format!("manifest in {}: {e}", dir.display())))?;
    let metrics = read_jsonl(&dir.join("metrics.jsonl")).unwrap_or_default();
    Ok(LoadedRun {
        dir: dir.to_path_buf(),
        manifest,
        metrics,
    })
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Gradient steps at the first iteration whose sampled test accuracy
/// reaches `target` (None if never).
pub fn steps_to_target(metrics: &[IterationMetrics], target: f64) -> Option<u64> {
    metrics
        .iter()
        .find(|m| m.test_acc >= target)
        .map(|m| m.gradient_steps)
}

/// Comparison report across run directories. Each argument is one group
/// (a seed dir, or a parent holding seed_* dirs); incompatible environment
/// settings are an error.
pub fn compare_runs(dirs: &[PathBuf], target_override: Option<f64>) -> Result<String> {
    if dirs.len() < 2 {
        return Err(Error::Config("compare needs at least two run directories".into()));
    }
    let groups: Vec<(PathBuf, Vec<LoadedRun>)> = dirs
        .iter()
        .map(|d| load_runs(d).map(|runs| (d.clone(), runs)))
        .collect::<Result<_>>()?;
    let env0 = groups[0].1[0].manifest.config.env;
    for (_, runs) in &groups {
        for run in runs {
            if run.manifest.config.env != env0 {
                return Err(Error::Config(format!(
                    "environment settings differ: {} was run on {:?}, expected {:?}",
                    run.dir.display(),
                    run.manifest.config.env,
                    env0
                )));
            }
        }
    }

    let mut out = String::new();
    use std::fmt::Write;
    let mut group_stats = Vec::new();
    for (dir, runs) in &groups {
        let label = format!(
            "{} ({})",
            runs[0].manifest.algorithm,
            dir.display()
        );
        let target = target_override
            .or(runs[0].manifest.config.run.target_accuracy)
            .unwrap_or(crate::config::DEFAULT_ENV_TARGET_ACCURACY);
        let finals: Vec<f64> = runs
            .iter()
            .filter_map(|r| r.metrics.last().map(|m| m.test_acc))
            .collect();
        let (fmean, fstd) = if finals.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            mean_std(&finals)
        };
        let steps: Vec<Option<u64>> = runs
            .iter()
            .map(|r| steps_to_target(&r.metrics, target))
            .collect();
        writeln!(out, "group: {label}").unwrap();
        writeln!(out, "  seeds: {}", runs.len()).unwrap();
        writeln!(out, "  final test acc: {fmean:.4} +/- {fstd:.4}").unwrap();
        let steps_str: Vec<String> = steps
            .iter()
            .map(|s| s.map(|v| v.to_string()).unwrap_or_else(|| "-".into()))
            .collect();
        writeln!(
            out,
            "  gradient steps to reach acc {target}: [{}]",
            steps_str.join(", ")
        )
        .unwrap();
        let reached: Vec<f64> = steps.iter().flatten().map(|&s| s as f64).collect();
        let mean_steps = if reached.is_empty() {
            None
        } else {
            Some(reached.iter().sum::<f64>() / reached.len() as f64)
        };
        group_stats.push((label, fmean, mean_steps));
    }

    if let [(la, fa, sa), (lb, fb, sb)] = &group_stats[..2] {
        writeln!(out, "deltas ({la} vs {lb}):").unwrap();
        writeln!(out, "  final test acc delta: {:+.4}", fa - fb).unwrap();
        match (sa, sb) {
            (Some(a), Some(b)) if *a > 0.0 && *b > 0.0 => {
                writeln!(out, "  mean steps to target: {a:.1} vs {b:.1}").unwrap();
                writeln!(out, "  gradient-step ratio: {:.2}x", b / a).unwrap();
            }
            _ => writeln!(out, "  gradient-step ratio: n/a (target not reached)").unwrap(),
        }
    }

    // KL-matched accuracy table over the shared grid, using per-group mean
    // curves.
    let curves: Vec<Vec<(f64, f64)>> = groups
        .iter()
        .map(|(_, runs)| mean_kl_curve(runs))
        .collect();
    if curves.iter().all(|c| c.len() >= 2) {
        let mut grid = crate::analysis::shared_kl_grid(&curves[0], &curves[1], 10);
        for c in &curves[2..] {
            grid = crate::analysis::shared_kl_grid(
                &grid.iter().map(|&k| (k, 0.0)).collect::<Vec<_>>(),
                c,
                10,
            );
        }
        writeln!(out, "accuracy at matched KL:").unwrap();
        write!(out, "  kl:").unwrap();
        for g in &grid {
            write!(out, " {g:>8.4}").unwrap();
        }
        writeln!(out).unwrap();
        for ((_, runs), curve) in groups.iter().zip(&curves) {
            write!(out, "  {:>4}:", runs[0].manifest.algorithm).unwrap();
            for g in &grid {
                match crate::analysis::interp_accuracy(curve, *g) {
                    Some(a) => write!(out, " {a:>8.4}").unwrap(),
                    None => write!(out, " {:>8}", "-").unwrap(),
                }
            }
            writeln!(out).unwrap();
        }
    }
    Ok(out)
}

/// Per-group accuracy-vs-KL curve: seed curves made monotone in KL, then
/// averaged pointwise on their shared grid.
pub fn mean_kl_curve(runs: &[LoadedRun]) -> Vec<(f64, f64)> {
    let per_seed: Vec<Vec<(f64, f64)>> = runs
        .iter()
        .filter(|r| !r.metrics.is_empty())
        .map(|r| {
            let curve = crate::analysis::accuracy_vs_kl_curve(&r.metrics).expect("non-empty");
            crate::analysis::monotone_kl(&curve).0
        })
        .collect();
    if per_seed.is_empty() {
        return Vec::new();
    }
    if per_seed.len() == 1 {
        return per_seed.into_iter().next().unwrap();
    }
    let lo = per_seed
        .iter()
        .map(|c| c[0].0)
        .fold(f64::NEG_INFINITY, f64::max);
    let hi = per_seed
        .iter()
        .map(|c| c[c.len() - 1].0)
        .fold(f64::INFINITY, f64::min);
    if hi <= lo {
        return per_seed.into_iter().next().unwrap();
    }
    let points = 25;
    (0..points)
        .map(|i| {
            let x = lo + (hi - lo) * i as f64 / (points - 1) as f64;
            let mut acc = 0.0;
            let mut n = 0usize;
            for c in &per_seed {
                if let Some(a) = crate::analysis::interp_accuracy(c, x) {
                    acc += a;
                    n += 1;
                }
            }
            (x, acc / n.max(1) as f64)
        })
        .collect()
}

/// Writes the figure-analogue CSV tables for one seed run into
/// `<dir>/analysis/`. Returns the files written.
pub fn analyze_run(dir: &Path) -> Result<Vec<PathBuf>> {
    let runs = load_runs(dir)?;
    let mut written = Vec::new();
    for run in runs {
        let adir = run.dir.join("analysis");
        std::fs::create_dir_all(&adir)?;
        if !run.metrics.is_empty() {
            let p = adir.join("fig6_kl.csv");
            crate::analysis::write_fig6_csv(&p, &run.metrics)?;
            written.push(p);
        }
        let values: Vec<crate::analysis::ValueAuditRecord> =
            read_jsonl(&run.dir.join("value_audit.jsonl")).unwrap_or_default();
        if !values.is_empty() {
            let p = adir.join("fig8_mae.csv");
            crate::analysis::write_fig8_csv(&p, &values)?;
            written.push(p);
            let p = adir.join("fig10_profile.csv");
            crate::analysis::write_fig10_csv(&p, &values)?;
            written.push(p);
            let p = adir.join("fig11a_acc.csv");
            crate::analysis::write_fig11a_csv(&p, &values)?;
            written.push(p);
        }
        let trials: Vec<crate::analysis::TopActionRecord> =
            read_jsonl(&run.dir.join("topaction_audit.jsonl")).unwrap_or_default();
        if !trials.is_empty() {
            let p = adir.join("fig11b_topaction.csv");
            crate::analysis::write_fig11b_csv(&p, &trials)?;
            written.push(p);
        }
    }
    Ok(written)
}

#[derive(Debug, Clone, Serialize)]
pub struct ReplayReport {
    pub tasks: usize,
    pub greedy_acc: f64,
    pub sampled_acc: f64,
    pub temperature: f64,
    pub rounds: u32,
}

/// Re-evaluates a checkpoint on a task file.
pub fn replay(
    checkpoint: &Path,
    tasks_file: &Path,
    max_length: Option<usize>,
    temperature: f64,
    rounds: u32,
    seed: u64,
) -> Result<ReplayReport> {
    let ckpt = load_policy(checkpoint)?;
    let tasks = crate::env::read_tasks_file(tasks_file)?;
    if tasks.is_empty() {
        return Err(Error::Artifact("task file holds no tasks".into()));
    }
    let n = tasks[0].difficulty.n as usize;
    let env = Env::new(ckpt.vocab, max_length.unwrap_or(2 * n + 2))?;
    let snap: PolicySnapshot = ckpt.policy().snapshot();
    let greedy_acc = crate::trainers::greedy_accuracy(&env, &snap, &tasks)?;
    let sampled_acc =
        crate::trainers::sampled_accuracy(&env, &snap, &tasks, temperature, rounds, seed)?;
    Ok(ReplayReport {
        tasks: tasks.len(),
        greedy_acc,
        sampled_acc,
        temperature,
        rounds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;

    fn quick_tiny(algo: &str) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::preset(&format!("tiny_{algo}")).unwrap();
        cfg.run.seeds = vec![1];
        cfg.ppo.iterations = 2;
        cfg.ppo.batch_prompts = 2;
        cfg.ppo.samples_per_prompt = 2;
        cfg.ppo.minibatch_trajs = 2;
        cfg.ppo.epochs_per_iter = 1;
        cfg.ppo.eval_rounds = 2;
        cfg.ppo.audit_every = 2;
        cfg.ppo.audit_trajectories = 2;
        cfg.ppo.audit_trials = 2;
        cfg.sft.epochs = 2;
        cfg
    }

    #[test]
    fn run_directory_is_complete_and_reruns_are_byte_identical() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = quick_tiny("vineppo");
        let out = tmp.path().join("run");
        execute(&cfg, &out, None, false).unwrap();
        let dir = seed_dir(&out, 1);
        for artifact in [
            "manifest.json",
            "config.toml",
            "tasks/train.txt",
            "tasks/val.txt",
            "tasks/test.txt",
            "pi_ref.ckpt",
            "sft_report.json",
            "metrics.jsonl",
            "timings.jsonl",
            "value_audit.jsonl",
            "topaction_audit.jsonl",
            "advantages.jsonl",
            "checkpoints/latest.ckpt",
            "checkpoints/best.ckpt",
            "checkpoints/final.ckpt",
            "summary.json",
        ] {
            assert!(dir.join(artifact).exists(), "missing {artifact}");
        }
        let first = std::fs::read(dir.join("metrics.jsonl")).unwrap();
        execute(&cfg, &out, None, false).unwrap();
        let second = std::fs::read(dir.join("metrics.jsonl")).unwrap();
        assert_eq!(first, second, "re-running the same seed must be byte-identical");
    }

    #[test]
    fn resume_continues_to_the_same_final_state() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = quick_tiny("vineppo");
        cfg.ppo.iterations = 4;
        let full_out = tmp.path().join("full");
        execute(&cfg, &full_out, None, false).unwrap();
        let full_metrics =
            std::fs::read_to_string(seed_dir(&full_out, 1).join("metrics.jsonl")).unwrap();

        let mut short = cfg.clone();
        short.ppo.iterations = 2;
        let out = tmp.path().join("resumable");
        execute(&short, &out, None, false).unwrap();
        // overwrite the recorded config with the full-length one, then resume
        std::fs::write(seed_dir(&out, 1).join("config.toml"), cfg.to_toml_string()).unwrap();
        execute(&cfg, &out, None, true).unwrap();
        let resumed_metrics =
            std::fs::read_to_string(seed_dir(&out, 1).join("metrics.jsonl")).unwrap();
        assert_eq!(
            full_metrics, resumed_metrics,
            "interrupted + resumed run must reproduce the uninterrupted metrics"
        );
    }

    #[test]
    fn compare_identical_runs_reports_zero_delta() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = quick_tiny("vineppo");
        let out_a = tmp.path().join("a");
        let out_b = tmp.path().join("b");
        execute(&cfg, &out_a, None, false).unwrap();
        execute(&cfg, &out_b, None, false).unwrap();
        let report = compare_runs(&[out_a, out_b], Some(0.5)).unwrap();
        assert!(
            report.contains("final test acc delta: +0.0000"),
            "expected zero delta in:\n{report}"
        );
    }

    #[test]
    fn compare_rejects_missing_and_incompatible_dirs() {
        let tmp = tempfile::tempdir().unwrap();
        let missing = tmp.path().join("nope");
        let err = compare_runs(&[missing.clone(), missing], None).unwrap_err();
        assert!(err.to_string().contains("nope"), "{err}");

        let cfg_a = quick_tiny("vineppo");
        let mut cfg_b = quick_tiny("vineppo");
        cfg_b.env.n = 3;
        let out_a = tmp.path().join("a");
        let out_b = tmp.path().join("b");
        execute(&cfg_a, &out_a, None, false).unwrap();
        execute(&cfg_b, &out_b, None, false).unwrap();
        assert!(matches!(
            compare_runs(&[out_a, out_b], None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn analyze_writes_figure_tables() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = quick_tiny("ppo");
        let out = tmp.path().join("run");
        execute(&cfg, &out, None, false).unwrap();
        let written = analyze_run(&out).unwrap();
        let names: Vec<String> = written
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        for expected in ["fig6_kl.csv", "fig8_mae.csv", "fig10_profile.csv", "fig11a_acc.csv", "fig11b_topaction.csv"] {
            assert!(names.contains(&expected.to_string()), "missing {expected}: {names:?}");
        }
    }

    #[test]
    fn replay_reproduces_checkpoint_accuracy() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = quick_tiny("sft");
        let out = tmp.path().join("run");
        let summary = execute(&cfg, &out, None, false).unwrap().remove(0);
        let dir = seed_dir(&out, 1);
        let report = replay(
            &dir.join("checkpoints/final.ckpt"),
            &dir.join("tasks/test.txt"),
            None,
            cfg.ppo.eval_temperature,
            cfg.ppo.eval_rounds,
            cfg.tasks.seed ^ 0x5f7e,
        )
        .unwrap();
        assert_eq!(
            report.sampled_acc, summary.final_test_acc,
            "replay with the recording seed must reproduce the summary accuracy"
        );
    }
}
