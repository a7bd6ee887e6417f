//! Training stack for the retrospective policy: data collection, reward
//! model fitting, supervised warm start, and clipped policy optimization.
//!
//! The loop mirrors a three-stage recipe:
//! 1. Collection. The frozen actor attempts each task for up to N trials.
//!    After every failed trial the current policy samples two reflections at
//!    a high temperature; each is rated by rolling out the next trial with
//!    it in memory and scoring the return delta. Both rated responses are
//!    appended to the replay buffer and the better one stays in memory for
//!    the rest of the task's chain.
//! 2. Reward model. Same-trial response pairs become preference examples; a
//!    linear head over the prompt-by-template features is fit with a
//!    pairwise logistic loss to score reflections offline.
//! 3. Policy optimization. An optional warm start raises the likelihood of
//!    positively rated responses, then a clipped surrogate is ascended on
//!    replay batches. Advantages are the reward-model score minus a KL
//!    penalty towards the frozen reference policy, mean-centered per batch.
//!    The behavior snapshot is refreshed at the start of every step, so each
//!    step is one conservative move away from the current policy.
//!
//! Step sizes here are tuned for the small linear parameterization, which
//! tolerates far larger moves per update than a large language model would.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actor::ActorPolicy;
use crate::buffer::{
    build_preferences, sample_batch, BufferError, RatingFilter, ReplayBuffer,
};
use crate::envs::{EnvError, Environment, RolloutError, RolloutOptions, TaskSpec};
use crate::retro::{
    build_reflection_prompt, extract_features, grad_log_softmax_prob, log_softmax_prob,
    read_checkpoint, sample_response, write_checkpoint, CheckpointKind, RetroError, RetroPolicy,
    TemplateLibrary, NUM_FEATURES,
};
use crate::types::{CoreError, PreferencePair, ReflectionRecord};
use crate::util::derive_seed;

/// Schema tag for run manifests.
pub const RUN_MANIFEST_SCHEMA: &str = "run-manifest-v1";

#[derive(Debug, Error)]
pub enum RlhfError {
    #[error("no preference pairs to fit")]
    EmptyPreferences,
    #[error("no positively rated records for warm start")]
    EmptySftSet,
    #[error("warm-start set contains a record rated {0}")]
    ContaminatedSftSet(f64),
    #[error("replay buffer holds no records")]
    EmptyBuffer,
    #[error("feature dimension mismatch: got {got}, model expects {expected}")]
    FeatureDim { got: usize, expected: usize },
    #[error("template id {id} out of range for {count} templates")]
    TemplateOutOfRange { id: usize, count: usize },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("serialization failed: {0}")]
    Format(String),
    #[error(transparent)]
    Retro(#[from] RetroError),
    #[error(transparent)]
    Buffer(#[from] BufferError),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Record(#[from] CoreError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Pipeline stages, used to attribute failures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PipelineStage {
    Collection,
    RewardModel,
    WarmStart,
    PolicyOptimization,
}

#[derive(Debug, Error)]
#[error("{stage:?} stage failed: {source}")]
pub struct PipelineError {
    pub stage: PipelineStage,
    #[source]
    pub source: RlhfError,
}

fn at_stage(stage: PipelineStage) -> impl Fn(RlhfError) -> PipelineError {
    move |source| PipelineError { stage, source }
}

// ---------------------------------------------------------------------------
// Reward model
// ---------------------------------------------------------------------------

/// Linear scorer over the same prompt-by-template features the policy uses:
/// `score(x, k) = w . psi(x, k)` with `psi = phi(x) (x) onehot(k)`, stored
/// row-major as `w[f * num_templates + k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardModel {
    weights: Vec<f64>,
    num_features: usize,
    num_templates: usize,
}

impl RewardModel {
    pub fn new_zeros(num_templates: usize) -> Self {
        Self {
            weights: vec![0.0; NUM_FEATURES * num_templates],
            num_features: NUM_FEATURES,
            num_templates,
        }
    }

    pub fn from_parts(weights: Vec<f64>, num_templates: usize) -> Result<Self, RlhfError> {
        if num_templates == 0 || weights.len() != NUM_FEATURES * num_templates {
            return Err(RlhfError::FeatureDim {
                got: weights.len(),
                expected: NUM_FEATURES * num_templates,
            });
        }
        Ok(Self { weights, num_features: NUM_FEATURES, num_templates })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn num_templates(&self) -> usize {
        self.num_templates
    }

    /// Scores template `k` for a prompt given as a feature vector.
    pub fn score_features(&self, phi: &[f64], k: usize) -> Result<f64, RlhfError> {
        if phi.len() != self.num_features {
            return Err(RlhfError::FeatureDim { got: phi.len(), expected: self.num_features });
        }
        if k >= self.num_templates {
            return Err(RlhfError::TemplateOutOfRange { id: k, count: self.num_templates });
        }
        Ok(phi
            .iter()
            .enumerate()
            .map(|(f, x)| x * self.weights[f * self.num_templates + k])
            .sum())
    }

    /// Scores template `k` for a rendered reflection prompt.
    pub fn score_text(&self, prompt_text: &str, k: usize) -> Result<f64, RlhfError> {
        self.score_features(&extract_features(prompt_text), k)
    }

    pub fn save(&self, path: &Path) -> Result<(), RlhfError> {
        write_checkpoint(
            path,
            CheckpointKind::RewardModel,
            self.num_features,
            self.num_templates,
            &[&self.weights],
        )?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, RlhfError> {
        let (num_features, num_templates, mut arrays) =
            read_checkpoint(path, CheckpointKind::RewardModel)?;
        if num_features != NUM_FEATURES || arrays.len() != 1 {
            return Err(RlhfError::Format(format!(
                "reward-model checkpoint has {} features and {} arrays",
                num_features,
                arrays.len()
            )));
        }
        Self::from_parts(arrays.remove(0), num_templates)
    }
}

/// Settings for reward-model fitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmConfig {
    /// Step size for full-batch gradient descent on the pairwise loss.
    pub learning_rate: f64,
    /// Number of full-batch steps.
    pub steps: usize,
}

impl Default for RmConfig {
    fn default() -> Self {
        Self { learning_rate: 2.5e-2, steps: 2000 }
    }
}

/// Fit result: the model plus the final training diagnostics.
#[derive(Debug, Clone)]
pub struct RewardModelFit {
    pub model: RewardModel,
    /// Mean pairwise logistic loss after the last step.
    pub final_loss: f64,
    /// Fraction of pairs whose accepted side outscores the rejected side.
    pub accuracy: f64,
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Fits the linear reward model on preference pairs with a pairwise
/// logistic (Bradley-Terry) loss: `mean softplus(-(s_acc - s_rej))`.
pub fn fit_reward_model(
    pairs: &[PreferencePair],
    num_templates: usize,
    config: &RmConfig,
) -> Result<RewardModelFit, RlhfError> {
    if pairs.is_empty() {
        return Err(RlhfError::EmptyPreferences);
    }
    // Both sides of a pair share the prompt, so one feature vector per pair.
    let prepared: Vec<(Vec<f64>, usize, usize)> = pairs
        .iter()
        .map(|p| {
            let phi = extract_features(&p.instruction);
            if p.accepted_id >= num_templates || p.rejected_id >= num_templates {
                return Err(RlhfError::TemplateOutOfRange {
                    id: p.accepted_id.max(p.rejected_id),
                    count: num_templates,
                });
            }
            Ok((phi, p.accepted_id, p.rejected_id))
        })
        .collect::<Result<_, _>>()?;

    let mut weights = vec![0.0; NUM_FEATURES * num_templates];
    let scale = 1.0 / prepared.len() as f64;
    for _ in 0..config.steps {
        let mut grad = vec![0.0; weights.len()];
        for (phi, acc, rej) in &prepared {
            let diff: f64 = phi
                .iter()
                .enumerate()
                .map(|(f, x)| {
                    x * (weights[f * num_templates + acc] - weights[f * num_templates + rej])
                })
                .sum();
            // d/d(diff) softplus(-diff) = -sigmoid(-diff)
            let coeff = -sigmoid(-diff) * scale;
            for (f, x) in phi.iter().enumerate() {
                grad[f * num_templates + acc] += coeff * x;
                grad[f * num_templates + rej] -= coeff * x;
            }
        }
        for (w, g) in weights.iter_mut().zip(&grad) {
            *w -= config.learning_rate * g;
        }
    }

    let model = RewardModel::from_parts(weights, num_templates)?;
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (phi, acc, rej) in &prepared {
        let diff = model.score_features(phi, *acc)? - model.score_features(phi, *rej)?;
        loss += softplus(-diff);
        if diff > 0.0 {
            correct += 1;
        }
    }
    Ok(RewardModelFit {
        model,
        final_loss: loss * scale,
        accuracy: correct as f64 / prepared.len() as f64,
    })
}

// ---------------------------------------------------------------------------
// Supervised warm start
// ---------------------------------------------------------------------------

/// Settings for the likelihood warm start on positively rated responses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftConfig {
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for SftConfig {
    fn default() -> Self {
        // The warm start is the main concentrator: full-batch ascent on a
        // convex objective, so a large rate and enough epochs to move each
        // context's probability meaningfully are safe.
        Self { epochs: 50, learning_rate: 0.25 }
    }
}

/// Per-epoch mean negative log-likelihood after each update.
#[derive(Debug, Clone, PartialEq)]
pub struct SftReport {
    pub epoch_losses: Vec<f64>,
}

/// Raises the policy likelihood of responses that improved their episode.
/// Every record must be strictly positively rated; the caller filters.
pub fn sft_warm_start(
    policy: &mut RetroPolicy,
    positives: &[ReflectionRecord],
    config: &SftConfig,
) -> Result<SftReport, RlhfError> {
    if positives.is_empty() {
        return Err(RlhfError::EmptySftSet);
    }
    if let Some(bad) = positives.iter().find(|r| r.rating <= 0.0) {
        return Err(RlhfError::ContaminatedSftSet(bad.rating));
    }
    let k_count = policy.num_templates();
    let prepared: Vec<(Vec<f64>, usize)> = positives
        .iter()
        .map(|r| {
            if r.response_id >= k_count {
                return Err(RlhfError::TemplateOutOfRange { id: r.response_id, count: k_count });
            }
            Ok((extract_features(&r.instruction), r.response_id))
        })
        .collect::<Result<_, _>>()?;

    let scale = 1.0 / prepared.len() as f64;
    let mut theta = policy.theta().to_vec();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        let mut grad = vec![0.0; theta.len()];
        for (phi, k) in &prepared {
            let g = grad_log_softmax_prob(&theta, phi, k_count, *k);
            for (gi, gv) in grad.iter_mut().zip(&g) {
                *gi += gv * scale;
            }
        }
        for (t, g) in theta.iter_mut().zip(&grad) {
            *t += config.learning_rate * g;
        }
        let nll: f64 = prepared
            .iter()
            .map(|(phi, k)| -log_softmax_prob(&theta, phi, k_count, *k))
            .sum::<f64>()
            * scale;
        epoch_losses.push(nll);
    }
    *policy = policy.with_theta(theta)?;
    Ok(SftReport { epoch_losses })
}

// ---------------------------------------------------------------------------
// Clipped policy optimization
// ---------------------------------------------------------------------------

/// Settings for the clipped-surrogate optimizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
    pub learning_rate: f64,
    /// Full-batch passes per step against one behavior snapshot.
    pub ppo_epochs: usize,
    /// Ratio clip half-width.
    pub clip_ratio: f64,
    /// Weight of the KL penalty towards the frozen reference policy.
    pub beta_kl: f64,
    pub batch_size: usize,
    /// Number of replay batches drawn over the whole run.
    pub updates: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1.4e-2,
            ppo_epochs: 4,
            clip_ratio: 0.2,
            beta_kl: 0.2,
            batch_size: 64,
            updates: 200,
        }
    }
}

/// One replay example prepared for the surrogate: fixed features, the acted
/// template, its advantage, and the behavior log-probability.
#[derive(Debug, Clone, PartialEq)]
pub struct PpoItem {
    pub features: Vec<f64>,
    pub response_id: usize,
    pub advantage: f64,
    pub old_logprob: f64,
}

/// Builds surrogate items from replay records against the current policy
/// snapshot: advantage is the reward-model score minus `beta_kl` times the
/// snapshot-to-reference log-ratio, mean-centered over the batch.
pub fn prepare_ppo_items(
    policy: &RetroPolicy,
    reward_model: &RewardModel,
    batch: &[ReflectionRecord],
    beta_kl: f64,
) -> Result<Vec<PpoItem>, RlhfError> {
    if batch.is_empty() {
        return Err(RlhfError::EmptyBuffer);
    }
    let k_count = policy.num_templates();
    let mut items = Vec::with_capacity(batch.len());
    for record in batch {
        let phi = extract_features(&record.instruction);
        let old_logprob = policy.log_prob_for_features(&phi, record.response_id)?;
        let ref_logprob =
            log_softmax_prob(policy.reference_theta(), &phi, k_count, record.response_id);
        let score = reward_model.score_features(&phi, record.response_id)?;
        let advantage = score - beta_kl * (old_logprob - ref_logprob);
        items.push(PpoItem { features: phi, response_id: record.response_id, advantage, old_logprob });
    }
    let mean = items.iter().map(|i| i.advantage).sum::<f64>() / items.len() as f64;
    for item in &mut items {
        item.advantage -= mean;
    }
    Ok(items)
}

/// Clipped surrogate objective:
/// `mean_i min(ratio_i * adv_i, clamp(ratio_i, 1 - clip, 1 + clip) * adv_i)`
/// with `ratio_i = exp(logprob_theta(k_i | x_i) - old_logprob_i)`.
pub fn ppo_surrogate(
    theta: &[f64],
    num_templates: usize,
    items: &[PpoItem],
    clip_ratio: f64,
) -> f64 {
    let mut total = 0.0;
    for item in items {
        let lp = log_softmax_prob(theta, &item.features, num_templates, item.response_id);
        let ratio = (lp - item.old_logprob).exp();
        let unclipped = ratio * item.advantage;
        let clipped = ratio.clamp(1.0 - clip_ratio, 1.0 + clip_ratio) * item.advantage;
        total += unclipped.min(clipped);
    }
    total / items.len() as f64
}

/// Analytic gradient of [`ppo_surrogate`] in `theta`. Items pinned at the
/// clip boundary contribute nothing, which is what makes the move
/// conservative.
pub fn ppo_surrogate_grad(
    theta: &[f64],
    num_templates: usize,
    items: &[PpoItem],
    clip_ratio: f64,
) -> Vec<f64> {
    let mut grad = vec![0.0; theta.len()];
    let scale = 1.0 / items.len() as f64;
    for item in items {
        let lp = log_softmax_prob(theta, &item.features, num_templates, item.response_id);
        let ratio = (lp - item.old_logprob).exp();
        let unclipped = ratio * item.advantage;
        let clipped = ratio.clamp(1.0 - clip_ratio, 1.0 + clip_ratio) * item.advantage;
        if unclipped <= clipped {
            let g = grad_log_softmax_prob(theta, &item.features, num_templates, item.response_id);
            let coeff = unclipped * scale;
            for (gi, gv) in grad.iter_mut().zip(&g) {
                *gi += coeff * gv;
            }
        }
    }
    grad
}

/// Diagnostics from one optimization step.
#[derive(Debug, Clone, PartialEq)]
pub struct PpoStepReport {
    pub batch_size: usize,
    /// Surrogate at entry; zero by construction of the centered advantages.
    pub surrogate_before: f64,
    pub surrogate_after: f64,
    pub mean_kl_after: f64,
    /// Fraction of items outside the trust band after the last epoch.
    pub clip_fraction: f64,
}

/// One optimization step: refresh the behavior snapshot from the current
/// policy, compute advantages against it, then ascend the clipped surrogate
/// for `ppo_epochs` full-batch passes.
pub fn ppo_step(
    policy: &mut RetroPolicy,
    reward_model: &RewardModel,
    batch: &[ReflectionRecord],
    config: &PpoConfig,
) -> Result<PpoStepReport, RlhfError> {
    let items = prepare_ppo_items(policy, reward_model, batch, config.beta_kl)?;
    let k_count = policy.num_templates();
    let mut theta = policy.theta().to_vec();
    let surrogate_before = ppo_surrogate(&theta, k_count, &items, config.clip_ratio);
    for _ in 0..config.ppo_epochs {
        let grad = ppo_surrogate_grad(&theta, k_count, &items, config.clip_ratio);
        for (t, g) in theta.iter_mut().zip(&grad) {
            *t += config.learning_rate * g;
        }
    }
    let surrogate_after = ppo_surrogate(&theta, k_count, &items, config.clip_ratio);
    if !surrogate_after.is_finite() {
        return Err(RlhfError::Numerical("non-finite surrogate after update".into()));
    }
    *policy = policy.with_theta(theta)?;

    let mut kl_total = 0.0;
    let mut clipped_count = 0usize;
    for item in &items {
        kl_total += policy.kl_for_features(&item.features)?;
        let lp = log_softmax_prob(policy.theta(), &item.features, k_count, item.response_id);
        let ratio = (lp - item.old_logprob).exp();
        if !(1.0 - config.clip_ratio..=1.0 + config.clip_ratio).contains(&ratio) {
            clipped_count += 1;
        }
    }
    Ok(PpoStepReport {
        batch_size: items.len(),
        surrogate_before,
        surrogate_after,
        mean_kl_after: kl_total / items.len() as f64,
        clip_fraction: clipped_count as f64 / items.len() as f64,
    })
}

// ---------------------------------------------------------------------------
// Collection
// ---------------------------------------------------------------------------

/// Settings for the retry-and-reflect collection stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectionConfig {
    /// Maximum trials per task, counting the first attempt.
    pub trials: u32,
    /// Sampling temperature for reflection exploration.
    pub sample_temperature: f64,
    /// Responses sampled per failed trial; pairs feed the reward model.
    pub samples_per_failure: usize,
}

impl Default for CollectionConfig {
    fn default() -> Self {
        Self { trials: 3, sample_temperature: 0.9, samples_per_failure: 2 }
    }
}

/// Totals from one collection pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollectionStats {
    pub tasks: usize,
    pub records_written: usize,
    pub first_trial_successes: usize,
    pub final_successes: usize,
}

struct TaskCollection {
    records: Vec<ReflectionRecord>,
    first_trial_success: bool,
    final_success: bool,
}

fn collect_task(
    env: &dyn Environment,
    task: &TaskSpec,
    actor: &dyn ActorPolicy,
    policy: &RetroPolicy,
    library: &TemplateLibrary,
    base_seed: u64,
    config: &CollectionConfig,
) -> Result<TaskCollection, RlhfError> {
    let mut records = Vec::new();
    let mut reflections: Vec<String> = Vec::new();
    let run = |reflections: &[String], trial: u32| -> Result<_, RlhfError> {
        let seed = derive_seed(base_seed, &[&task.task_id, "rollout", &trial.to_string()]);
        let options = RolloutOptions::for_env(env, seed, trial);
        Ok(crate::envs::rollout(env, task, actor, reflections, &options)?)
    };

    let mut current = run(&reflections, 1)?;
    let first_trial_success = current.success;
    let mut trial = 1u32;
    while !current.success && trial < config.trials {
        let prompt = build_reflection_prompt(&current)?;
        let mut candidates = Vec::with_capacity(config.samples_per_failure);
        for s in 0..config.samples_per_failure {
            let sample_seed = derive_seed(
                base_seed,
                &[&task.task_id, "trial", &trial.to_string(), "sample", &s.to_string()],
            );
            let sampled =
                sample_response(policy, library, &prompt, config.sample_temperature, sample_seed)?;
            let phi = extract_features(&prompt.rendered);
            let unit_logprob = policy.log_prob_for_features(&phi, sampled.response_id)?;
            let mut with_candidate = reflections.clone();
            with_candidate.push(sampled.response_text.clone());
            let after = run(&with_candidate, trial + 1)?;
            let record = ReflectionRecord::new(
                task.env_id.as_str(),
                task.task_id.as_str(),
                trial,
                prompt.rendered.as_str(),
                sampled.response_id,
                sampled.response_text.as_str(),
                current.episode_return,
                after.episode_return,
                unit_logprob,
            )?;
            records.push(record);
            candidates.push((sampled.response_text, after));
        }
        // Keep the better continuation; first sample wins ties.
        let best = candidates
            .iter()
            .enumerate()
            .max_by(|(ia, (_, a)), (ib, (_, b))| {
                a.episode_return
                    .partial_cmp(&b.episode_return)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(ib.cmp(ia))
            })
            .map(|(i, _)| i)
            .unwrap_or(0);
        let (text, after) = candidates.swap_remove(best);
        reflections.push(text);
        current = after;
        trial += 1;
    }
    Ok(TaskCollection { records, first_trial_success, final_success: current.success })
}

/// Runs collection over a task list, in parallel across tasks, and appends
/// all records to the buffer in task order so reruns are byte-identical.
#[allow(clippy::too_many_arguments)]
pub fn collect_env(
    env: &dyn Environment,
    tasks: &[TaskSpec],
    actor: &dyn ActorPolicy,
    policy: &RetroPolicy,
    library: &TemplateLibrary,
    buffer: &ReplayBuffer,
    base_seed: u64,
    config: &CollectionConfig,
) -> Result<CollectionStats, RlhfError> {
    let outcomes: Vec<Result<TaskCollection, RlhfError>> = tasks
        .par_iter()
        .map(|task| collect_task(env, task, actor, policy, library, base_seed, config))
        .collect();
    let mut stats = CollectionStats {
        tasks: tasks.len(),
        records_written: 0,
        first_trial_successes: 0,
        final_successes: 0,
    };
    for outcome in outcomes {
        let outcome = outcome?;
        for record in &outcome.records {
            buffer.append(record)?;
        }
        stats.records_written += outcome.records.len();
        stats.first_trial_successes += outcome.first_trial_success as usize;
        stats.final_successes += outcome.final_success as usize;
    }
    Ok(stats)
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

/// Settings for the full train run. The scalar seed comes before the
/// sub-configs so the struct serializes cleanly to formats where values must
/// precede nested tables.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub collection: CollectionConfig,
    pub rm: RmConfig,
    pub sft: SftConfig,
    pub ppo: PpoConfig,
}

/// Summary of a completed run, persisted as `manifest.json`. Wall-clock time
/// is kept in memory only so manifests stay byte-reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: String,
    pub env_id: String,
    pub seed: u64,
    pub tasks: usize,
    pub records_written: usize,
    pub first_trial_successes: usize,
    pub final_successes: usize,
    pub preference_pairs: usize,
    pub ties_skipped: usize,
    pub reward_model_loss: f64,
    pub reward_model_accuracy: f64,
    /// True when no positively rated record existed, so the warm start was
    /// skipped rather than fit on an empty set.
    pub sft_skipped: bool,
    pub sft_epoch_losses: Vec<f64>,
    pub ppo_updates: usize,
    pub ppo_final_surrogate: f64,
    pub ppo_final_kl: f64,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<(), RlhfError> {
        let mut body =
            serde_json::to_string_pretty(self).map_err(|e| RlhfError::Format(e.to_string()))?;
        body.push('\n');
        std::fs::write(path, body)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, RlhfError> {
        let body = std::fs::read_to_string(path)?;
        let manifest: RunManifest =
            serde_json::from_str(&body).map_err(|e| RlhfError::Format(e.to_string()))?;
        if manifest.schema != RUN_MANIFEST_SCHEMA {
            return Err(RlhfError::Format(format!("bad manifest schema {:?}", manifest.schema)));
        }
        Ok(manifest)
    }
}

/// Everything a finished pipeline leaves behind.
#[derive(Debug)]
pub struct PipelineArtifacts {
    pub policy: RetroPolicy,
    pub reward_model: RewardModel,
    pub manifest: RunManifest,
    pub buffer_path: PathBuf,
    pub policy_path: PathBuf,
    pub reward_model_path: PathBuf,
    pub manifest_path: PathBuf,
}

/// Runs collect, reward-model fit, warm start, and policy optimization, and
/// writes `buffer.jsonl`, `policy.ckpt`, `reward_model.ckpt`, and
/// `manifest.json` into `out_dir`.
pub fn run_pipeline(
    env: &dyn Environment,
    tasks: &[TaskSpec],
    actor: &dyn ActorPolicy,
    library: &TemplateLibrary,
    config: &PipelineConfig,
    out_dir: &Path,
) -> Result<PipelineArtifacts, PipelineError> {
    let started = Instant::now();
    std::fs::create_dir_all(out_dir)
        .map_err(|e| at_stage(PipelineStage::Collection)(e.into()))?;
    let buffer_path = out_dir.join("buffer.jsonl");
    let policy_path = out_dir.join("policy.ckpt");
    let reward_model_path = out_dir.join("reward_model.ckpt");
    let manifest_path = out_dir.join("manifest.json");

    // Stage 1: collect rated reflections with the frozen uniform policy.
    let collection = at_stage(PipelineStage::Collection);
    let mut policy = RetroPolicy::new_uniform(library.len());
    let buffer = ReplayBuffer::create(&buffer_path).map_err(|e| collection(e.into()))?;
    let collect_seed = derive_seed(config.seed, &["collect", env.env_id()]);
    let stats = collect_env(
        env,
        tasks,
        actor,
        &policy,
        library,
        &buffer,
        collect_seed,
        &config.collection,
    )
    .map_err(collection)?;

    // Stage 2: preference pairs and the reward model.
    let rm_stage = at_stage(PipelineStage::RewardModel);
    let records = ReplayBuffer::read_all(&buffer_path).map_err(|e| rm_stage(e.into()))?;
    if records.is_empty() {
        return Err(rm_stage(RlhfError::EmptyBuffer));
    }
    let preferences = build_preferences(&records).map_err(|e| rm_stage(e.into()))?;
    let fit = fit_reward_model(&preferences.pairs, library.len(), &config.rm).map_err(rm_stage)?;

    // Stage 3a: warm start on improving responses, when any exist.
    let positives: Vec<ReflectionRecord> =
        records.iter().filter(|r| r.rating > 0.0).cloned().collect();
    let (sft_skipped, sft_epoch_losses) = if positives.is_empty() {
        (true, Vec::new())
    } else {
        let report = sft_warm_start(&mut policy, &positives, &config.sft)
            .map_err(at_stage(PipelineStage::WarmStart))?;
        (false, report.epoch_losses)
    };

    // Stage 3b: clipped-surrogate optimization on replay batches.
    let ppo_stage = at_stage(PipelineStage::PolicyOptimization);
    let mut last_report = None;
    for update in 0..config.ppo.updates {
        let batch_seed = derive_seed(config.seed, &["ppo-batch", &update.to_string()]);
        let batch =
            sample_batch(&records, RatingFilter::All, config.ppo.batch_size, batch_seed)
                .map_err(|e| ppo_stage(e.into()))?;
        let report = ppo_step(&mut policy, &fit.model, &batch, &config.ppo).map_err(&ppo_stage)?;
        last_report = Some(report);
    }

    crate::retro::save_policy(&policy, &policy_path).map_err(|e| ppo_stage(e.into()))?;
    fit.model.save(&reward_model_path).map_err(&ppo_stage)?;
    let manifest = RunManifest {
        schema: RUN_MANIFEST_SCHEMA.to_string(),
        env_id: env.env_id().to_string(),
        seed: config.seed,
        tasks: stats.tasks,
        records_written: stats.records_written,
        first_trial_successes: stats.first_trial_successes,
        final_successes: stats.final_successes,
        preference_pairs: preferences.pairs.len(),
        ties_skipped: preferences.ties_skipped,
        reward_model_loss: fit.final_loss,
        reward_model_accuracy: fit.accuracy,
        sft_skipped,
        sft_epoch_losses,
        ppo_updates: config.ppo.updates,
        ppo_final_surrogate: last_report.as_ref().map(|r| r.surrogate_after).unwrap_or(0.0),
        ppo_final_kl: last_report.as_ref().map(|r| r.mean_kl_after).unwrap_or(0.0),
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    manifest.save(&manifest_path).map_err(&ppo_stage)?;

    Ok(PipelineArtifacts {
        policy,
        reward_model: fit.model,
        manifest,
        buffer_path,
        policy_path,
        reward_model_path,
        manifest_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::actor::ScriptedActor;
    use crate::envs::{build_env, canonical_world_seed, generate_task_sets};

    /// A reflection prompt whose feature signature is a premature finish:
    /// one search, then a terminal answer, with zero return.
    fn premature_prompt() -> String {
        "Observation 1: Question: who?\nAction 1: Search[Mara Quinn]\nReward 1: 0.0000\n\
         Observation 2: Mara Quinn is an actor.\nAction 2: Finish[Silver Harbor]\nReward 2: 0.0000\n\
         Episode return: 0.0000\nYou failed the task above. Write one short lesson that would \
         fix the mistake in your next attempt."
            .to_string()
    }

    /// A looping signature: the same action twice in a row, no terminal.
    fn loop_prompt() -> String {
        "Observation 1: Question: who?\nAction 1: Search[Mara Quinn]\nReward 1: 0.0000\n\
         Observation 2: Mara Quinn is an actor.\nAction 2: Search[Mara Quinn]\nReward 2: 0.0000\n\
         Episode return: 0.0000\nYou failed the task above. Write one short lesson that would \
         fix the mistake in your next attempt."
            .to_string()
    }

    /// A wrong-target signature: distinct searches that all miss.
    fn wrong_entity_prompt() -> String {
        "Observation 1: Question: who?\nAction 1: Search[Mara Vance]\nReward 1: 0.0000\n\
         Observation 2: Could not find Mara Vance.\nAction 2: Search[Mara Vance attempt 2]\n\
         Reward 2: 0.0000\nObservation 3: Could not find Mara Vance attempt 2.\n\
         Action 3: Search[Mara Vance attempt 3]\nReward 3: 0.0000\n\
         Episode return: 0.0000\nYou failed the task above. Write one short lesson that would \
         fix the mistake in your next attempt."
            .to_string()
    }

    /// A missed-confirmation signature: both hops searched, then a terminal
    /// answer without any lookup.
    fn missed_lookup_prompt() -> String {
        "Observation 1: Question: who?\nAction 1: Search[Mara Quinn]\nReward 1: 0.0000\n\
         Observation 2: Mara Quinn is an actor.\nAction 2: Search[Silver Harbor]\n\
         Reward 2: 0.0000\nObservation 3: Silver Harbor is a film.\n\
         Action 3: Finish[Silver Harbor]\nReward 3: 0.0000\n\
         Episode return: 0.0000\nYou failed the task above. Write one short lesson that would \
         fix the mistake in your next attempt."
            .to_string()
    }

    fn record_with(instruction: &str, id: usize, before: f64, after: f64) -> ReflectionRecord {
        ReflectionRecord::new(
            "synthqa",
            "q001",
            1,
            instruction,
            id,
            format!("response {id}"),
            before,
            after,
            (1.0f64 / 8.0).ln(),
        )
        .unwrap()
    }

    fn pair_preferring(instruction: &str, winner: usize, loser: usize) -> PreferencePair {
        let hi = record_with(instruction, winner, 0.0, 1.0);
        let lo = record_with(instruction, loser, 0.0, 0.0);
        PreferencePair::from_records(&hi, &lo).unwrap()
    }

    #[test]
    fn test_reward_model_zeroes_score_nothing() {
        let rm = RewardModel::new_zeros(8);
        let phi = extract_features(&premature_prompt());
        for k in 0..8 {
            assert_eq!(rm.score_features(&phi, k).unwrap(), 0.0);
        }
        assert!(rm.score_features(&[1.0], 0).is_err());
        assert!(matches!(
            rm.score_features(&phi, 9),
            Err(RlhfError::TemplateOutOfRange { .. })
        ));
    }

    #[test]
    fn test_fit_reward_model_learns_context_dependent_ranking() {
        let premature = premature_prompt();
        let looping = loop_prompt();
        let mut pairs = Vec::new();
        for _ in 0..4 {
            pairs.push(pair_preferring(&premature, 0, 6));
            pairs.push(pair_preferring(&premature, 0, 2));
            pairs.push(pair_preferring(&looping, 2, 0));
            pairs.push(pair_preferring(&looping, 2, 7));
        }
        let fit = fit_reward_model(&pairs, 8, &RmConfig { learning_rate: 2.5e-2, steps: 800 })
            .unwrap();
        assert_eq!(fit.accuracy, 1.0, "loss {}", fit.final_loss);
        assert!(fit.final_loss < 0.5);
        // Context decides the winner: template 0 on premature prompts,
        // template 2 on looping prompts.
        let s0p = fit.model.score_text(&premature, 0).unwrap();
        let s2p = fit.model.score_text(&premature, 2).unwrap();
        let s0l = fit.model.score_text(&looping, 0).unwrap();
        let s2l = fit.model.score_text(&looping, 2).unwrap();
        assert!(s0p > s2p, "premature context: {s0p} vs {s2p}");
        assert!(s2l > s0l, "looping context: {s2l} vs {s0l}");
    }

    #[test]
    fn test_fit_reward_model_rejects_empty_and_out_of_range() {
        assert!(matches!(
            fit_reward_model(&[], 8, &RmConfig::default()),
            Err(RlhfError::EmptyPreferences)
        ));
        let bad = pair_preferring(&premature_prompt(), 9, 0);
        assert!(matches!(
            fit_reward_model(&[bad], 8, &RmConfig::default()),
            Err(RlhfError::TemplateOutOfRange { .. })
        ));
    }

    #[test]
    fn test_reward_model_checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rm.ckpt");
        let weights: Vec<f64> = (0..NUM_FEATURES * 8).map(|i| (i as f64) * 0.125 - 3.0).collect();
        let rm = RewardModel::from_parts(weights, 8).unwrap();
        rm.save(&path).unwrap();
        let loaded = RewardModel::load(&path).unwrap();
        assert_eq!(loaded, rm);
        // A policy checkpoint is not a reward model.
        let policy = RetroPolicy::new_uniform(8);
        let ppath = dir.path().join("p.ckpt");
        crate::retro::save_policy(&policy, &ppath).unwrap();
        assert!(RewardModel::load(&ppath).is_err());
    }

    #[test]
    fn test_sft_raises_likelihood_of_positive_responses() {
        let mut policy = RetroPolicy::new_uniform(8);
        let prompt = premature_prompt();
        let positives: Vec<ReflectionRecord> =
            (0..6).map(|_| record_with(&prompt, 0, 0.0, 1.0)).collect();
        let phi = extract_features(&prompt);
        let before = policy.probs_for_features(&phi).unwrap()[0];
        let report = sft_warm_start(
            &mut policy,
            &positives,
            &SftConfig { epochs: 5, learning_rate: 0.5 },
        )
        .unwrap();
        let after = policy.probs_for_features(&phi).unwrap()[0];
        assert!(after > before, "{after} vs {before}");
        assert_eq!(report.epoch_losses.len(), 5);
        assert!(
            report.epoch_losses.windows(2).all(|w| w[1] <= w[0] + 1e-12),
            "losses not non-increasing: {:?}",
            report.epoch_losses
        );
    }

    #[test]
    fn test_sft_rejects_empty_and_contaminated_sets() {
        let mut policy = RetroPolicy::new_uniform(8);
        assert!(matches!(
            sft_warm_start(&mut policy, &[], &SftConfig::default()),
            Err(RlhfError::EmptySftSet)
        ));
        let flat = record_with(&premature_prompt(), 0, 0.5, 0.5);
        assert!(matches!(
            sft_warm_start(&mut policy, &[flat], &SftConfig::default()),
            Err(RlhfError::ContaminatedSftSet(_))
        ));
    }

    #[test]
    fn test_ppo_surrogate_is_zero_at_snapshot() {
        let policy = RetroPolicy::new_uniform(8);
        let rm = {
            let mut weights = vec![0.0; NUM_FEATURES * 8];
            // Feature 0 rows for templates 0 and 2.
            weights[0] = 1.5;
            weights[2] = -0.5;
            RewardModel::from_parts(weights, 8).unwrap()
        };
        let batch = vec![
            record_with(&premature_prompt(), 0, 0.0, 1.0),
            record_with(&premature_prompt(), 2, 0.0, 0.0),
            record_with(&loop_prompt(), 5, 0.0, 0.0),
        ];
        let items = prepare_ppo_items(&policy, &rm, &batch, 0.2).unwrap();
        // Centered advantages mean the surrogate vanishes at ratio one.
        let s = ppo_surrogate(policy.theta(), 8, &items, 0.2);
        assert!(s.abs() < 1e-12, "surrogate at snapshot was {s}");
        let mean_adv: f64 = items.iter().map(|i| i.advantage).sum::<f64>() / items.len() as f64;
        assert!(mean_adv.abs() < 1e-12);
    }

    #[test]
    fn test_ppo_grad_matches_finite_differences() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        let k_count = 8;
        for _ in 0..10 {
            let theta: Vec<f64> =
                (0..NUM_FEATURES * k_count).map(|_| rng.random_range(-1.0..1.0)).collect();
            let items: Vec<PpoItem> = (0..6)
                .map(|_| {
                    let features: Vec<f64> =
                        (0..NUM_FEATURES).map(|f| if f == 0 { 1.0 } else { f64::from(rng.random_range(0..2) as u8) }).collect();
                    let response_id = rng.random_range(0..k_count);
                    PpoItem {
                        old_logprob: log_softmax_prob(&theta, &features, k_count, response_id)
                            + rng.random_range(-0.1..0.1),
                        features,
                        response_id,
                        advantage: rng.random_range(-1.0..1.0),
                    }
                })
                .collect();
            let grad = ppo_surrogate_grad(&theta, k_count, &items, 0.2);
            let h = 1e-6;
            for probe in [0, 5, 17, 42, 95] {
                let mut plus = theta.clone();
                plus[probe] += h;
                let mut minus = theta.clone();
                minus[probe] -= h;
                let fd = (ppo_surrogate(&plus, k_count, &items, 0.2)
                    - ppo_surrogate(&minus, k_count, &items, 0.2))
                    / (2.0 * h);
                let denom = fd.abs().max(grad[probe].abs()).max(1e-8);
                assert!(
                    (fd - grad[probe]).abs() / denom < 1e-4,
                    "coordinate {probe}: fd {fd} vs analytic {}",
                    grad[probe]
                );
            }
        }
    }

    #[test]
    fn test_ppo_step_moves_towards_reward_and_reports() {
        let mut policy = RetroPolicy::new_uniform(8);
        let mut weights = vec![0.0; NUM_FEATURES * 8];
        weights[0] = 2.0; // bias row, template 0
        let rm = RewardModel::from_parts(weights, 8).unwrap();
        let prompt = premature_prompt();
        let batch: Vec<ReflectionRecord> =
            (0..8).map(|k| record_with(&prompt, k % 8, 0.0, if k == 0 { 1.0 } else { 0.0 })).collect();
        let phi = extract_features(&prompt);
        let before = policy.probs_for_features(&phi).unwrap()[0];
        let report = ppo_step(&mut policy, &rm, &batch, &PpoConfig::default()).unwrap();
        let after = policy.probs_for_features(&phi).unwrap()[0];
        assert!(after > before, "{after} vs {before}");
        assert!(report.surrogate_before.abs() < 1e-12);
        assert!(report.surrogate_after > report.surrogate_before);
        assert!(report.mean_kl_after > 0.0);
        assert_eq!(report.batch_size, 8);
    }

    #[test]
    fn test_ppo_snapshot_refresh_keeps_making_progress() {
        let mut policy = RetroPolicy::new_uniform(8);
        let mut weights = vec![0.0; NUM_FEATURES * 8];
        // Reward template 0 on the single-search row, the one live feature
        // of the premature prompt.
        weights[0] = 3.0;
        let rm = RewardModel::from_parts(weights, 8).unwrap();
        let prompt = premature_prompt();
        let batch: Vec<ReflectionRecord> =
            (0..8).map(|k| record_with(&prompt, k % 8, 0.0, if k == 0 { 1.0 } else { 0.0 })).collect();
        let phi = extract_features(&prompt);
        let config = PpoConfig { beta_kl: 0.0, ..PpoConfig::default() };
        let mut last = policy.probs_for_features(&phi).unwrap()[0];
        for _ in 0..400 {
            ppo_step(&mut policy, &rm, &batch, &config).unwrap();
            let p = policy.probs_for_features(&phi).unwrap()[0];
            assert!(p >= last - 1e-9, "probability regressed: {p} < {last}");
            last = p;
        }
        // With the snapshot refreshed each step, repeated steps escape the
        // initial trust region and concentrate the policy.
        assert!(last > 0.9, "only reached {last}");
    }

    #[test]
    fn test_beta_kl_restrains_divergence() {
        let prompt = premature_prompt();
        let mut weights = vec![0.0; NUM_FEATURES * 8];
        weights[0] = 2.0;
        let rm = RewardModel::from_parts(weights, 8).unwrap();
        let batch: Vec<ReflectionRecord> =
            (0..8).map(|k| record_with(&prompt, k % 8, 0.0, if k == 0 { 1.0 } else { 0.0 })).collect();
        let phi = extract_features(&prompt);
        let mut kls = Vec::new();
        for beta in [0.0, 0.2, 1.0] {
            let mut policy = RetroPolicy::new_uniform(8);
            let config = PpoConfig { beta_kl: beta, ..PpoConfig::default() };
            for _ in 0..40 {
                ppo_step(&mut policy, &rm, &batch, &config).unwrap();
            }
            kls.push(policy.kl_for_features(&phi).unwrap());
        }
        assert!(
            kls[0] >= kls[1] && kls[1] >= kls[2],
            "KL not non-increasing in beta: {kls:?}"
        );
        assert!(kls[2] < kls[0], "penalty had no effect: {kls:?}");
    }

    #[test]
    fn test_collection_writes_pairs_and_chains_best() {
        let dir = tempfile::tempdir().unwrap();
        let env_id = "synthqa";
        let env = build_env(env_id, canonical_world_seed(env_id, 7)).unwrap();
        let (train, _) = generate_task_sets(env_id, 7, 50, 30).unwrap();
        let library = TemplateLibrary::builtin();
        let actor = ScriptedActor::new(library.clone());
        let policy = RetroPolicy::new_uniform(library.len());
        let buffer_path = dir.path().join("buffer.jsonl");
        let buffer = ReplayBuffer::create(&buffer_path).unwrap();
        let tasks = &train.tasks[..12];
        let stats = collect_env(
            env.as_ref(),
            tasks,
            &actor,
            &policy,
            &library,
            &buffer,
            99,
            &CollectionConfig::default(),
        )
        .unwrap();
        assert_eq!(stats.tasks, 12);
        assert!(stats.records_written > 0);
        assert!(stats.final_successes >= stats.first_trial_successes);

        let records = ReplayBuffer::read_all(&buffer_path).unwrap();
        assert_eq!(records.len(), stats.records_written);
        // Records arrive in same-trial pairs, so preferences build cleanly.
        let build = build_preferences(&records).unwrap();
        assert_eq!(build.pairs.len() + build.ties_skipped, records.len() / 2);
        // The sampling policy was uniform, so every stored behavior
        // log-probability is ln(1/8).
        for record in &records {
            assert!((record.old_logprob - (1.0f64 / 8.0).ln()).abs() < 1e-12);
            assert_eq!(record.env_id, env_id);
            assert!(record.trial_index < CollectionConfig::default().trials);
        }
    }

    #[test]
    fn test_collection_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let env = build_env("synthshop", canonical_world_seed("synthshop", 7)).unwrap();
        let (train, _) = generate_task_sets("synthshop", 7, 50, 30).unwrap();
        let library = TemplateLibrary::builtin();
        let actor = ScriptedActor::new(library.clone());
        let policy = RetroPolicy::new_uniform(library.len());
        let mut bodies = Vec::new();
        for run in 0..2 {
            let path = dir.path().join(format!("buffer{run}.jsonl"));
            let buffer = ReplayBuffer::create(&path).unwrap();
            collect_env(
                env.as_ref(),
                &train.tasks[..10],
                &actor,
                &policy,
                &library,
                &buffer,
                5,
                &CollectionConfig::default(),
            )
            .unwrap();
            bodies.push(std::fs::read(&path).unwrap());
        }
        assert_eq!(bodies[0], bodies[1], "parallel collection not reproducible");
    }

    #[test]
    fn test_run_pipeline_produces_artifacts_and_learns() {
        let dir = tempfile::tempdir().unwrap();
        let env = build_env("synthqa", canonical_world_seed("synthqa", 7)).unwrap();
        let (train, _) = generate_task_sets("synthqa", 7, 50, 30).unwrap();
        let library = TemplateLibrary::builtin();
        let actor = ScriptedActor::new(library.clone());
        let config = PipelineConfig { seed: 7, ..PipelineConfig::default() };
        let artifacts =
            run_pipeline(env.as_ref(), &train.tasks, &actor, &library, &config, dir.path())
                .unwrap();
        for path in [
            &artifacts.buffer_path,
            &artifacts.policy_path,
            &artifacts.reward_model_path,
            &artifacts.manifest_path,
        ] {
            assert!(path.exists(), "{path:?} missing");
        }
        let manifest = RunManifest::load(&artifacts.manifest_path).unwrap();
        assert_eq!(manifest.env_id, "synthqa");
        assert_eq!(manifest.tasks, 50);
        assert!(manifest.records_written > 0);
        assert!(manifest.preference_pairs > 0);
        assert!(manifest.reward_model_accuracy > 0.9, "rm accuracy {}", manifest.reward_model_accuracy);
        assert!(!manifest.sft_skipped);
        assert!(manifest.wall_clock_secs == 0.0, "wall clock must not serialize");

        // After training, each failure signature should route most policy
        // mass to the template that corrects it.
        let cases = [
            (premature_prompt(), 0usize),
            (wrong_entity_prompt(), 1),
            (loop_prompt(), 2),
            (missed_lookup_prompt(), 3),
        ];
        for (prompt, corrective) in cases {
            let phi = extract_features(&prompt);
            let probs = artifacts.policy.probs_for_features(&phi).unwrap();
            let argmax =
                (0..probs.len()).max_by(|a, b| probs[*a].partial_cmp(&probs[*b]).unwrap()).unwrap();
            assert_eq!(
                argmax, corrective,
                "signature expecting template {corrective} got {probs:?}"
            );
            assert!(
                probs[corrective] > 0.5,
                "template {corrective} mass too small: {probs:?}"
            );
        }
        // Reloading the checkpoint reproduces the same policy.
        let reloaded = crate::retro::load_policy(&artifacts.policy_path).unwrap();
        assert_eq!(reloaded.theta(), artifacts.policy.theta());
    }
}
