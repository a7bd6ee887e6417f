//! Experiment harness: retry-loop evaluation, baseline comparison, report
//! and CSV export, and the experiment configuration file.
//!
//! Evaluation protocol, per task: trial 0 runs with empty long-term memory.
//! After every failed trial the configured reflection source produces one
//! response, which is appended to memory before the retry. A task that
//! succeeds stops retrying, and counts as solved at every later trial, so
//! each per-trial success curve is non-decreasing ("success sticks").
//!
//! Trial counting: report trial `t` is attempt `t + 1`; `n_retries` counts
//! the retries after trial 0, so a curve has `n_retries + 1` points and the
//! trial-0 point never depends on the retry budget or reflection source.
//!
//! Baselines: `no_reflection` retries with no memory at all, `frozen_retro`
//! samples reflections from the untrained uniform policy, `reinforced_retro`
//! samples from a trained checkpoint, and `reinforced_best_of_n` additionally
//! screens each draw set with the reward model.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actor::{ActorPolicy, ScriptedActor};
use crate::envs::{
    build_env, canonical_world_seed, generate_task_sets, rollout, EnvError, Environment,
    RolloutError, RolloutOptions, TaskSpec,
};
use crate::retro::{
    build_reflection_prompt, sample_response, RetroError, RetroPolicy, TemplateLibrary,
};
use crate::rlhf::{
    run_pipeline, PipelineArtifacts, PipelineConfig, PipelineError, RewardModel, RlhfError,
};
use crate::sampler::{best_of_n, SamplerError, DEFAULT_BEST_OF_N};
use crate::util::{derive_seed, sha256_hex};

/// Schema tag for single-baseline report files.
pub const REPORT_SCHEMA: &str = "experiment-report/1";
/// Schema tag for comparison report files.
pub const COMPARISON_SCHEMA: &str = "comparison-report/1";

/// Baseline labels used in reports and CSV output.
pub const BASELINE_NO_REFLECTION: &str = "no_reflection";
pub const BASELINE_FROZEN: &str = "frozen_retro";
pub const BASELINE_REINFORCED: &str = "reinforced_retro";
pub const BASELINE_BEST_OF_N: &str = "reinforced_best_of_n";

/// Ways harness operations can fail.
#[derive(Debug, Error)]
pub enum HarnessError {
    /// A required trained checkpoint does not exist.
    #[error("checkpoint missing: {}", path.display())]
    CheckpointMissing { path: PathBuf },
    /// Evaluation was asked for zero retries.
    #[error("evaluation needs at least one retry after trial 0")]
    NoRetries,
    /// Evaluation was asked to average over zero tasks.
    #[error("evaluation needs at least one task")]
    NoTasks,
    /// Invalid configuration value.
    #[error("bad config: {0}")]
    Config(String),
    /// Malformed report or config file.
    #[error("bad file format: {0}")]
    Format(String),
    /// Failure while evaluating one task, with the task attached.
    #[error("task {task_id}: {source}")]
    Task {
        task_id: String,
        #[source]
        source: Box<HarnessError>,
    },
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error(transparent)]
    Retro(#[from] RetroError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Rlhf(#[from] RlhfError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Evaluation-time settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Retries granted after the unreflected first attempt; curves have
    /// `n_retries + 1` points.
    pub n_retries: usize,
    /// Sampling temperature for evaluation-time reflections.
    pub temperature: f64,
    /// Number of draws for the best-of-n reflection source.
    pub best_of_n: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { n_retries: 4, temperature: 0.9, best_of_n: DEFAULT_BEST_OF_N }
    }
}

/// One experiment end to end: which environment and task split to use, how to
/// train the retrospective policy, and how to evaluate the result.
///
/// Loads from a TOML file; any missing top-level key falls back to its
/// default, but a partially given section must be completed in full.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub env_id: String,
    /// Seed for world generation and the train/validation split.
    pub task_seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    /// Worker-thread bound for parallel task evaluation; 0 uses the library
    /// default.
    pub jobs: usize,
    pub pipeline: PipelineConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            env_id: "synthqa".to_string(),
            task_seed: 7,
            n_train: 50,
            n_val: 30,
            jobs: 0,
            pipeline: PipelineConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        let config: Self =
            toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String, HarnessError> {
        toml::to_string(self).map_err(|e| HarnessError::Format(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }

    /// Rejects values no run could use, before any work starts.
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.n_train == 0 || self.n_val == 0 {
            return Err(HarnessError::Config("task splits must be non-empty".into()));
        }
        if self.eval.n_retries == 0 {
            return Err(HarnessError::Config("eval.n_retries must be at least 1".into()));
        }
        if !(self.eval.temperature.is_finite() && self.eval.temperature > 0.0) {
            return Err(HarnessError::Config("eval.temperature must be positive".into()));
        }
        if self.eval.best_of_n == 0 {
            return Err(HarnessError::Config("eval.best_of_n must be at least 1".into()));
        }
        Ok(())
    }
}

/// Hex SHA-256 of the config's canonical JSON serialization. Field order is
/// fixed by the struct declarations, so the hash changes exactly when some
/// field value changes.
pub fn config_hash(config: &ExperimentConfig) -> Result<String, HarnessError> {
    let canonical =
        serde_json::to_string(config).map_err(|e| HarnessError::Format(e.to_string()))?;
    Ok(sha256_hex(canonical.as_bytes()))
}

// ---------------------------------------------------------------------------
// Reflection strategies
// ---------------------------------------------------------------------------

/// Where retry reflections come from during evaluation.
#[derive(Debug, Clone, Copy)]
pub enum ReflectionStrategy<'a> {
    /// Retries carry no memory; the deterministic actor repeats itself.
    NoReflection,
    /// One temperature sample per failure from the given policy.
    Sample { policy: &'a RetroPolicy },
    /// `n` draws per failure; the reward model's favorite is kept.
    BestOfN { policy: &'a RetroPolicy, reward_model: &'a RewardModel, n: usize },
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// How one task fared across the retry loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskOutcome {
    pub task_id: String,
    /// First trial index (0-based) that succeeded; `None` if every trial
    /// failed. Under success-sticks the task counts as solved at this trial
    /// and every later one.
    pub first_success_trial: Option<usize>,
}

/// One baseline's evaluation: the success curve plus per-task outcomes.
/// Wall-clock time stays in memory only, so saved reports are byte-identical
/// across reruns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema: String,
    pub env_id: String,
    pub baseline: String,
    pub seed: u64,
    pub n_tasks: usize,
    pub n_retries: usize,
    /// Hash of the governing experiment config; empty when evaluated outside
    /// a full experiment.
    pub config_hash: String,
    /// Cumulative success rate at trials `0..=n_retries`; non-decreasing.
    pub success_by_trial: Vec<f64>,
    pub outcomes: Vec<TaskOutcome>,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl ExperimentReport {
    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        let mut body =
            serde_json::to_string_pretty(self).map_err(|e| HarnessError::Format(e.to_string()))?;
        body.push('\n');
        fs::write(path, body)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let body = fs::read_to_string(path)?;
        let report: Self =
            serde_json::from_str(&body).map_err(|e| HarnessError::Format(e.to_string()))?;
        if report.schema != REPORT_SCHEMA {
            return Err(HarnessError::Format(format!("bad report schema {:?}", report.schema)));
        }
        Ok(report)
    }
}

/// Several baselines evaluated on the same tasks with the same seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub schema: String,
    pub env_id: String,
    pub seed: u64,
    pub n_retries: usize,
    pub config_hash: String,
    pub baselines: Vec<ExperimentReport>,
}

impl ComparisonReport {
    /// Curve rows as CSV: one data row per baseline per trial, so
    /// `(n_retries + 1) * baselines.len()` rows after the header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("baseline,trial,success_rate,n_tasks,seed\n");
        for report in &self.baselines {
            for (trial, rate) in report.success_by_trial.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{}",
                    report.baseline, trial, rate, report.n_tasks, report.seed
                );
            }
        }
        out
    }

    /// Plain-text table of success rates per trial, for terminal display.
    pub fn to_table_string(&self) -> String {
        let mut out = String::new();
        let width = self
            .baselines
            .iter()
            .map(|b| b.baseline.len())
            .max()
            .unwrap_or(8)
            .max("baseline".len());
        let _ = write!(out, "{:<width$}", "baseline");
        for trial in 0..=self.n_retries {
            let _ = write!(out, "  trial{trial}");
        }
        out.push('\n');
        for report in &self.baselines {
            let _ = write!(out, "{:<width$}", report.baseline);
            for rate in &report.success_by_trial {
                let _ = write!(out, "  {rate:>6.3}");
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        let mut body =
            serde_json::to_string_pretty(self).map_err(|e| HarnessError::Format(e.to_string()))?;
        body.push('\n');
        fs::write(path, body)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let body = fs::read_to_string(path)?;
        let report: Self =
            serde_json::from_str(&body).map_err(|e| HarnessError::Format(e.to_string()))?;
        if report.schema != COMPARISON_SCHEMA {
            return Err(HarnessError::Format(format!(
                "bad comparison schema {:?}",
                report.schema
            )));
        }
        Ok(report)
    }
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

fn run_in_pool<T: Send>(
    jobs: usize,
    work: impl FnOnce() -> T + Send,
) -> Result<T, HarnessError> {
    if jobs == 0 {
        return Ok(work());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| HarnessError::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(work))
}

fn evaluate_task(
    env: &dyn Environment,
    actor: &dyn ActorPolicy,
    library: &TemplateLibrary,
    task: &TaskSpec,
    strategy: ReflectionStrategy<'_>,
    eval: &EvalConfig,
    seed: u64,
) -> Result<TaskOutcome, HarnessError> {
    let mut memory: Vec<String> = Vec::new();
    let mut first_success_trial = None;
    for trial in 0..=eval.n_retries {
        let trial_index = trial as u32 + 1;
        let rollout_seed =
            derive_seed(seed, &[&task.task_id, "rollout", &trial_index.to_string()]);
        let options = RolloutOptions::for_env(env, rollout_seed, trial_index);
        let trajectory = rollout(env, task, actor, &memory, &options)?;
        if trajectory.success {
            first_success_trial = Some(trial);
            break;
        }
        if trial == eval.n_retries {
            break;
        }
        match strategy {
            ReflectionStrategy::NoReflection => {}
            ReflectionStrategy::Sample { policy } => {
                let prompt = build_reflection_prompt(&trajectory)?;
                let reflect_seed =
                    derive_seed(seed, &[&task.task_id, "reflect", &trial_index.to_string()]);
                let sampled =
                    sample_response(policy, library, &prompt, eval.temperature, reflect_seed)?;
                memory.push(sampled.response_text);
            }
            ReflectionStrategy::BestOfN { policy, reward_model, n } => {
                let prompt = build_reflection_prompt(&trajectory)?;
                let reflect_seed =
                    derive_seed(seed, &[&task.task_id, "reflect", &trial_index.to_string()]);
                let picked = best_of_n(
                    policy,
                    reward_model,
                    library,
                    &prompt,
                    n,
                    eval.temperature,
                    reflect_seed,
                )?;
                memory.push(picked.response_text);
            }
        }
    }
    Ok(TaskOutcome { task_id: task.task_id.clone(), first_success_trial })
}

/// Runs the retry loop over `tasks` and aggregates the success-sticks curve.
///
/// Rollout and reflection seeds derive from `(seed, task_id, trial)`, so the
/// trial-0 attempt is identical across strategies and the whole report is a
/// pure function of its inputs. Tasks evaluate in parallel up to `jobs`
/// threads (0 = library default); aggregation is sequential in task order.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    env: &dyn Environment,
    actor: &dyn ActorPolicy,
    library: &TemplateLibrary,
    tasks: &[TaskSpec],
    strategy: ReflectionStrategy<'_>,
    baseline: &str,
    eval: &EvalConfig,
    seed: u64,
    jobs: usize,
) -> Result<ExperimentReport, HarnessError> {
    if eval.n_retries == 0 {
        return Err(HarnessError::NoRetries);
    }
    if tasks.is_empty() {
        return Err(HarnessError::NoTasks);
    }
    let started = Instant::now();
    let results: Vec<Result<TaskOutcome, HarnessError>> = run_in_pool(jobs, || {
        tasks
            .par_iter()
            .map(|task| {
                evaluate_task(env, actor, library, task, strategy, eval, seed).map_err(|e| {
                    HarnessError::Task { task_id: task.task_id.clone(), source: Box::new(e) }
                })
            })
            .collect()
    })?;
    let mut outcomes = Vec::with_capacity(tasks.len());
    for result in results {
        outcomes.push(result?);
    }
    let n_tasks = outcomes.len();
    let mut success_by_trial = Vec::with_capacity(eval.n_retries + 1);
    for trial in 0..=eval.n_retries {
        let solved = outcomes
            .iter()
            .filter(|o| o.first_success_trial.is_some_and(|k| k <= trial))
            .count();
        success_by_trial.push(solved as f64 / n_tasks as f64);
    }
    Ok(ExperimentReport {
        schema: REPORT_SCHEMA.to_string(),
        env_id: env.env_id().to_string(),
        baseline: baseline.to_string(),
        seed,
        n_tasks,
        n_retries: eval.n_retries,
        config_hash: String::new(),
        success_by_trial,
        outcomes,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

/// Evaluates the standard baselines on one task list: no reflection, the
/// frozen uniform policy, the reinforced policy, and, when a reward model is
/// given, the reinforced policy with best-of-n screening.
#[allow(clippy::too_many_arguments)]
pub fn compare(
    env: &dyn Environment,
    actor: &dyn ActorPolicy,
    library: &TemplateLibrary,
    tasks: &[TaskSpec],
    reinforced: &RetroPolicy,
    reward_model: Option<&RewardModel>,
    eval: &EvalConfig,
    seed: u64,
    jobs: usize,
) -> Result<ComparisonReport, HarnessError> {
    let frozen = RetroPolicy::new_uniform(library.len());
    let mut baselines = vec![
        evaluate(
            env,
            actor,
            library,
            tasks,
            ReflectionStrategy::NoReflection,
            BASELINE_NO_REFLECTION,
            eval,
            seed,
            jobs,
        )?,
        evaluate(
            env,
            actor,
            library,
            tasks,
            ReflectionStrategy::Sample { policy: &frozen },
            BASELINE_FROZEN,
            eval,
            seed,
            jobs,
        )?,
        evaluate(
            env,
            actor,
            library,
            tasks,
            ReflectionStrategy::Sample { policy: reinforced },
            BASELINE_REINFORCED,
            eval,
            seed,
            jobs,
        )?,
    ];
    if let Some(rm) = reward_model {
        baselines.push(evaluate(
            env,
            actor,
            library,
            tasks,
            ReflectionStrategy::BestOfN {
                policy: reinforced,
                reward_model: rm,
                n: eval.best_of_n,
            },
            BASELINE_BEST_OF_N,
            eval,
            seed,
            jobs,
        )?);
    }
    Ok(ComparisonReport {
        schema: COMPARISON_SCHEMA.to_string(),
        env_id: env.env_id().to_string(),
        seed,
        n_retries: eval.n_retries,
        config_hash: String::new(),
        baselines,
    })
}

// ---------------------------------------------------------------------------
// Checkpoint loading
// ---------------------------------------------------------------------------

/// Loads a policy checkpoint, reporting a missing file as such rather than a
/// generic I/O error.
pub fn load_policy_checkpoint(path: &Path) -> Result<RetroPolicy, HarnessError> {
    if !path.exists() {
        return Err(HarnessError::CheckpointMissing { path: path.to_path_buf() });
    }
    Ok(crate::retro::load_policy(path)?)
}

/// Loads a reward-model checkpoint, reporting a missing file as such.
pub fn load_reward_model_checkpoint(path: &Path) -> Result<RewardModel, HarnessError> {
    if !path.exists() {
        return Err(HarnessError::CheckpointMissing { path: path.to_path_buf() });
    }
    Ok(RewardModel::load(path)?)
}

// ---------------------------------------------------------------------------
// Full experiment
// ---------------------------------------------------------------------------

/// Everything a full experiment writes: the training artifacts plus the
/// validation comparison and its CSV.
#[derive(Debug)]
pub struct ExperimentArtifacts {
    pub pipeline: PipelineArtifacts,
    pub comparison: ComparisonReport,
    pub comparison_path: PathBuf,
    pub csv_path: PathBuf,
}

/// Trains on the train split and compares all baselines on the validation
/// split. Writes the pipeline artifacts plus `comparison.json` and
/// `curves.csv` into `out_dir`.
pub fn run_full_experiment(
    config: &ExperimentConfig,
    out_dir: &Path,
) -> Result<ExperimentArtifacts, HarnessError> {
    config.validate()?;
    let world_seed = canonical_world_seed(&config.env_id, config.task_seed);
    let env = build_env(&config.env_id, world_seed)?;
    let (train, val) =
        generate_task_sets(&config.env_id, config.task_seed, config.n_train, config.n_val)?;
    let library = TemplateLibrary::builtin();
    let actor = ScriptedActor::new(library.clone());
    let artifacts =
        run_pipeline(env.as_ref(), &train.tasks, &actor, &library, &config.pipeline, out_dir)?;
    let eval_seed = derive_seed(config.pipeline.seed, &["evaluate", &config.env_id]);
    let mut comparison = compare(
        env.as_ref(),
        &actor,
        &library,
        &val.tasks,
        &artifacts.policy,
        Some(&artifacts.reward_model),
        &config.eval,
        eval_seed,
        config.jobs,
    )?;
    let hash = config_hash(config)?;
    comparison.config_hash = hash.clone();
    for baseline in &mut comparison.baselines {
        baseline.config_hash = hash.clone();
    }
    let comparison_path = out_dir.join("comparison.json");
    comparison.save(&comparison_path)?;
    let csv_path = out_dir.join("curves.csv");
    fs::write(&csv_path, comparison.to_csv())?;
    Ok(ExperimentArtifacts { pipeline: artifacts, comparison, comparison_path, csv_path })
}
