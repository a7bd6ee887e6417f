//! Command-line front end for the retrospect pipeline.
//!
//! The training verbs decompose the offline pipeline stage by stage and use
//! the same seed derivations, so `collect`, `train-rm`, and `train-ppo`
//! chained with one seed reproduce exactly what the fused library pipeline
//! writes. Every verb is deterministic given its inputs: rerunning a command
//! yields byte-identical artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use retrospect::actor::ScriptedActor;
use retrospect::buffer::{build_preferences, sample_batch, RatingFilter, ReplayBuffer};
use retrospect::envs::{
    build_env, canonical_world_seed, generate_task_sets, Environment, TaskSet, TaskSpec,
};
use retrospect::harness::{
    compare, config_hash, evaluate, load_policy_checkpoint, load_reward_model_checkpoint,
    ComparisonReport, ExperimentConfig, ReflectionStrategy, BASELINE_BEST_OF_N, BASELINE_FROZEN,
    BASELINE_NO_REFLECTION, BASELINE_REINFORCED,
};
use retrospect::retro::{save_policy, RetroPolicy, TemplateLibrary};
use retrospect::rlhf::{collect_env, fit_reward_model, ppo_step, sft_warm_start};
use retrospect::util::derive_seed;

#[derive(Parser)]
#[command(
    name = "retrospect",
    version,
    about = "Train and evaluate a retrospective reflection policy on scripted text tasks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/validation task sets (and optionally the template
    /// library) as JSON fixtures.
    GenTasks(GenTasksArgs),
    /// Roll out the train split and write rated reflections to a replay
    /// buffer.
    Collect(CollectArgs),
    /// Fit the reward model from a replay buffer's preference pairs.
    TrainRm(TrainRmArgs),
    /// Warm start on positive reflections, then run the clipped-surrogate
    /// optimization; writes the policy checkpoint.
    TrainPpo(TrainPpoArgs),
    /// Evaluate one baseline on the validation split and write a report.
    Evaluate(EvaluateArgs),
    /// Evaluate all baselines and write a comparison report plus CSV curves.
    Compare(CompareArgs),
    /// Re-export a saved comparison report as CSV and print its table.
    Export(ExportArgs),
}

/// Flags shared by every verb.
#[derive(Args)]
struct CommonArgs {
    /// Experiment config TOML; built-in defaults apply when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Base seed; overrides the config's pipeline seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Replay buffer path.
    #[arg(long, value_name = "PATH", default_value = "buffer.jsonl")]
    buffer: PathBuf,
}

impl CommonArgs {
    /// Loads the config (or defaults) and applies the seed override.
    fn config(&self) -> Result<ExperimentConfig> {
        let mut config = match &self.config {
            Some(path) => ExperimentConfig::load(path)
                .with_context(|| format!("loading config {}", path.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            config.pipeline.seed = seed;
        }
        Ok(config)
    }
}

#[derive(Args)]
struct GenTasksArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Environment to generate for; defaults to the config's environment.
    #[arg(long)]
    env: Option<String>,
    /// Output directory for `<env>_train.json` and `<env>_val.json`.
    #[arg(long, value_name = "DIR", default_value = "fixtures")]
    out: PathBuf,
    /// Also write the built-in template library to this path.
    #[arg(long, value_name = "PATH")]
    templates: Option<PathBuf>,
}

#[derive(Args)]
struct CollectArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Task-set JSON to collect on; defaults to the regenerated train split.
    #[arg(long, value_name = "PATH")]
    tasks: Option<PathBuf>,
}

#[derive(Args)]
struct TrainRmArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Where to write the reward-model checkpoint.
    #[arg(long, value_name = "PATH", default_value = "reward_model.ckpt")]
    out: PathBuf,
}

#[derive(Args)]
struct TrainPpoArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Reward-model checkpoint to score batches with.
    #[arg(long, value_name = "PATH", default_value = "reward_model.ckpt")]
    reward_model: PathBuf,
    /// Where to write the policy checkpoint.
    #[arg(long, value_name = "PATH", default_value = "policy.ckpt")]
    out: PathBuf,
}

/// Which reflection source to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BaselineArg {
    /// Retry with no memory at all.
    NoReflection,
    /// Sample reflections from the untrained uniform policy.
    Frozen,
    /// Sample reflections from the trained policy checkpoint.
    Reinforced,
    /// Sample n reflections from the trained policy and keep the
    /// reward model's favorite.
    BestOfN,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Reflection source to evaluate.
    #[arg(long, value_enum, default_value_t = BaselineArg::Reinforced)]
    baseline: BaselineArg,
    /// Trained policy checkpoint (for reinforced and best-of-n baselines).
    #[arg(long, value_name = "PATH", default_value = "policy.ckpt")]
    policy: PathBuf,
    /// Reward-model checkpoint (for the best-of-n baseline).
    #[arg(long, value_name = "PATH", default_value = "reward_model.ckpt")]
    reward_model: PathBuf,
    /// Task-set JSON to evaluate on; defaults to the regenerated validation
    /// split.
    #[arg(long, value_name = "PATH")]
    tasks: Option<PathBuf>,
    /// Where to write the report.
    #[arg(long, value_name = "PATH", default_value = "report.json")]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Trained policy checkpoint for the reinforced baselines.
    #[arg(long, value_name = "PATH", default_value = "policy.ckpt")]
    policy: PathBuf,
    /// Reward-model checkpoint; when present the best-of-n baseline is
    /// included.
    #[arg(long, value_name = "PATH")]
    reward_model: Option<PathBuf>,
    /// Task-set JSON to evaluate on; defaults to the regenerated validation
    /// split.
    #[arg(long, value_name = "PATH")]
    tasks: Option<PathBuf>,
    /// Output directory for `comparison.json` and `curves.csv`.
    #[arg(long, value_name = "DIR", default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Saved comparison report.
    #[arg(long, value_name = "PATH", default_value = "comparison.json")]
    report: PathBuf,
    /// Where to write the CSV curves.
    #[arg(long, value_name = "PATH", default_value = "curves.csv")]
    out: PathBuf,
}

/// Which half of the generated split a verb works on.
enum Split {
    Train,
    Val,
}

/// Either loads an explicit task-set file (rebuilding its world from the
/// recorded seed) or regenerates the requested split from the config.
fn resolve_tasks(
    config: &ExperimentConfig,
    tasks_path: Option<&Path>,
    split: Split,
) -> Result<(Box<dyn Environment>, Vec<TaskSpec>)> {
    match tasks_path {
        Some(path) => {
            let set = TaskSet::load(path)
                .with_context(|| format!("loading task set {}", path.display()))?;
            let env = build_env(&set.env_id, set.world_seed)?;
            Ok((env, set.tasks))
        }
        None => {
            let world_seed = canonical_world_seed(&config.env_id, config.task_seed);
            let env = build_env(&config.env_id, world_seed)?;
            let (train, val) = generate_task_sets(
                &config.env_id,
                config.task_seed,
                config.n_train,
                config.n_val,
            )?;
            let tasks = match split {
                Split::Train => train.tasks,
                Split::Val => val.tasks,
            };
            Ok((env, tasks))
        }
    }
}

fn ensure_parent_dir(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .with_context(|| format!("creating {}", parent.display()))?;
        }
    }
    Ok(())
}

fn cmd_gen_tasks(args: GenTasksArgs) -> Result<()> {
    let mut config = args.common.config()?;
    if let Some(env_id) = args.env {
        config.env_id = env_id;
    }
    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let (train, val) = generate_task_sets(
        &config.env_id,
        config.task_seed,
        config.n_train,
        config.n_val,
    )?;
    let train_path = args.out.join(format!("{}_train.json", config.env_id));
    let val_path = args.out.join(format!("{}_val.json", config.env_id));
    train.save(&train_path)?;
    val.save(&val_path)?;
    println!("wrote {} ({} tasks)", train_path.display(), train.tasks.len());
    println!("wrote {} ({} tasks)", val_path.display(), val.tasks.len());
    if let Some(templates_path) = args.templates {
        ensure_parent_dir(&templates_path)?;
        let library = TemplateLibrary::builtin();
        library.save(&templates_path)?;
        println!("wrote {} ({} templates)", templates_path.display(), library.len());
    }
    Ok(())
}

fn cmd_collect(args: CollectArgs) -> Result<()> {
    let config = args.common.config()?;
    let (env, tasks) = resolve_tasks(&config, args.tasks.as_deref(), Split::Train)?;
    let library = TemplateLibrary::builtin();
    let actor = ScriptedActor::new(library.clone());
    let policy = RetroPolicy::new_uniform(library.len());
    ensure_parent_dir(&args.common.buffer)?;
    let buffer = ReplayBuffer::create(&args.common.buffer)?;
    let collect_seed = derive_seed(config.pipeline.seed, &["collect", env.env_id()]);
    let stats = collect_env(
        env.as_ref(),
        &tasks,
        &actor,
        &policy,
        &library,
        &buffer,
        collect_seed,
        &config.pipeline.collection,
    )?;
    println!("{}", serde_json::to_string_pretty(&stats)?);
    println!("wrote {}", args.common.buffer.display());
    Ok(())
}

fn cmd_train_rm(args: TrainRmArgs) -> Result<()> {
    let config = args.common.config()?;
    let records = ReplayBuffer::read_all(&args.common.buffer)
        .with_context(|| format!("reading buffer {}", args.common.buffer.display()))?;
    let preferences = build_preferences(&records)?;
    let library = TemplateLibrary::builtin();
    let fit = fit_reward_model(&preferences.pairs, library.len(), &config.pipeline.rm)?;
    ensure_parent_dir(&args.out)?;
    fit.model.save(&args.out)?;
    println!(
        "{}",
        serde_json::json!({
            "records": records.len(),
            "preference_pairs": preferences.pairs.len(),
            "ties_skipped": preferences.ties_skipped,
            "final_loss": fit.final_loss,
            "accuracy": fit.accuracy,
        })
    );
    println!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_train_ppo(args: TrainPpoArgs) -> Result<()> {
    let config = args.common.config()?;
    let records = ReplayBuffer::read_all(&args.common.buffer)
        .with_context(|| format!("reading buffer {}", args.common.buffer.display()))?;
    let reward_model = load_reward_model_checkpoint(&args.reward_model)?;
    let library = TemplateLibrary::builtin();
    let mut policy = RetroPolicy::new_uniform(library.len());
    let positives: Vec<_> = records.iter().filter(|r| r.rating > 0.0).cloned().collect();
    let sft_skipped = positives.is_empty();
    if !sft_skipped {
        sft_warm_start(&mut policy, &positives, &config.pipeline.sft)?;
    }
    let mut last_report = None;
    for update in 0..config.pipeline.ppo.updates {
        let batch_seed =
            derive_seed(config.pipeline.seed, &["ppo-batch", &update.to_string()]);
        let batch = sample_batch(
            &records,
            RatingFilter::All,
            config.pipeline.ppo.batch_size,
            batch_seed,
        )?;
        last_report = Some(ppo_step(&mut policy, &reward_model, &batch, &config.pipeline.ppo)?);
    }
    ensure_parent_dir(&args.out)?;
    save_policy(&policy, &args.out)?;
    println!(
        "{}",
        serde_json::json!({
            "records": records.len(),
            "sft_skipped": sft_skipped,
            "ppo_updates": config.pipeline.ppo.updates,
            "final_surrogate": last_report.as_ref().map(|r| r.surrogate_after),
            "final_kl": last_report.as_ref().map(|r| r.mean_kl_after),
        })
    );
    println!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let config = args.common.config()?;
    let (env, tasks) = resolve_tasks(&config, args.tasks.as_deref(), Split::Val)?;
    let library = TemplateLibrary::builtin();
    let actor = ScriptedActor::new(library.clone());
    let frozen = RetroPolicy::new_uniform(library.len());
    let trained;
    let reward_model;
    let (strategy, label) = match args.baseline {
        BaselineArg::NoReflection => {
            (ReflectionStrategy::NoReflection, BASELINE_NO_REFLECTION)
        }
        BaselineArg::Frozen => {
            (ReflectionStrategy::Sample { policy: &frozen }, BASELINE_FROZEN)
        }
        BaselineArg::Reinforced => {
            trained = load_policy_checkpoint(&args.policy)?;
            (ReflectionStrategy::Sample { policy: &trained }, BASELINE_REINFORCED)
        }
        BaselineArg::BestOfN => {
            trained = load_policy_checkpoint(&args.policy)?;
            reward_model = load_reward_model_checkpoint(&args.reward_model)?;
            (
                ReflectionStrategy::BestOfN {
                    policy: &trained,
                    reward_model: &reward_model,
                    n: config.eval.best_of_n,
                },
                BASELINE_BEST_OF_N,
            )
        }
    };
    let eval_seed = derive_seed(config.pipeline.seed, &["evaluate", env.env_id()]);
    let mut report = evaluate(
        env.as_ref(),
        &actor,
        &library,
        &tasks,
        strategy,
        label,
        &config.eval,
        eval_seed,
        config.jobs,
    )?;
    report.config_hash = config_hash(&config)?;
    ensure_parent_dir(&args.out)?;
    report.save(&args.out)?;
    println!("baseline {label}: success by trial {:?}", report.success_by_trial);
    println!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_compare(args: CompareArgs) -> Result<()> {
    let config = args.common.config()?;
    let (env, tasks) = resolve_tasks(&config, args.tasks.as_deref(), Split::Val)?;
    let library = TemplateLibrary::builtin();
    let actor = ScriptedActor::new(library.clone());
    let trained = load_policy_checkpoint(&args.policy)?;
    let reward_model = match &args.reward_model {
        Some(path) => Some(load_reward_model_checkpoint(path)?),
        None => None,
    };
    let eval_seed = derive_seed(config.pipeline.seed, &["evaluate", env.env_id()]);
    let mut report = compare(
        env.as_ref(),
        &actor,
        &library,
        &tasks,
        &trained,
        reward_model.as_ref(),
        &config.eval,
        eval_seed,
        config.jobs,
    )?;
    let hash = config_hash(&config)?;
    report.config_hash = hash.clone();
    for baseline in &mut report.baselines {
        baseline.config_hash = hash.clone();
    }
    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let report_path = args.out.join("comparison.json");
    let csv_path = args.out.join("curves.csv");
    report.save(&report_path)?;
    fs::write(&csv_path, report.to_csv())?;
    print!("{}", report.to_table_string());
    println!("wrote {}", report_path.display());
    println!("wrote {}", csv_path.display());
    Ok(())
}

fn cmd_export(args: ExportArgs) -> Result<()> {
    // Export consumes no config values, but still validates an explicitly
    // given config file so typos fail fast.
    args.common.config()?;
    let report = ComparisonReport::load(&args.report)
        .with_context(|| format!("loading report {}", args.report.display()))?;
    ensure_parent_dir(&args.out)?;
    fs::write(&args.out, report.to_csv())?;
    print!("{}", report.to_table_string());
    println!("wrote {}", args.out.display());
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenTasks(args) => cmd_gen_tasks(args),
        Command::Collect(args) => cmd_collect(args),
        Command::TrainRm(args) => cmd_train_rm(args),
        Command::TrainPpo(args) => cmd_train_ppo(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Compare(args) => cmd_compare(args),
        Command::Export(args) => cmd_export(args),
    }
}
