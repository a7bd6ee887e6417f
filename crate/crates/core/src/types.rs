//! Domain types shared by every stage of the pipeline.
//!
//! A [`Trajectory`] is one finished episode: the ordered (state, action,
//! reward) steps, the episode return, and a success flag. A
//! [`ReflectionRecord`] ties a reflection response to the pair of episodes
//! around it and carries the response's rating, defined as the change in
//! episode return between consecutive trials of the same task:
//!
//! ```text
//! rating = return(trial i+1) - return(trial i)
//! ```
//!
//! A positive rating means the reflection made the next attempt better.
//! [`PreferencePair`]s order two responses to the same failed trial by their
//! ratings and feed the reward model.
//!
//! All types are plain immutable data with serde support; construction
//! validates the invariants once so downstream stages can rely on them.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors raised by domain-type validation and rating computation.
#[derive(Debug, Error)]
pub enum CoreError {
    /// Two trajectories that must describe the same task do not.
    #[error("trajectories identify different tasks: ({0}, {1}) vs ({2}, {3})")]
    IdentityMismatch(String, String, String, String),
    /// Rating requires consecutive trials, after = before + 1.
    #[error("trial order violated: before trial {before}, after trial {after}")]
    TrialOrder { before: u32, after: u32 },
    /// Step timesteps must run 1..=T with no gaps.
    #[error("step {index} has timestep {got}, expected {expected}")]
    BadTimestep { index: usize, got: u32, expected: u32 },
    /// Actions are never empty strings.
    #[error("step {index} has an empty action")]
    EmptyAction { index: usize },
    /// Episode returns and step rewards live in [0, 1].
    #[error("{what} {value} outside [0, 1]")]
    ValueOutOfRange { what: &'static str, value: f64 },
    /// Trial indices start at 1.
    #[error("trial_index must be >= 1")]
    ZeroTrialIndex,
    /// A record's stored rating must equal return_after - return_before.
    #[error("stored rating {stored} does not equal return_after - return_before = {expected}")]
    RatingMismatch { stored: f64, expected: f64 },
    /// Preference pairs need strictly ordered ratings.
    #[error("preference pair is not strictly ordered: accepted {accepted} vs rejected {rejected}")]
    NotStrictlyOrdered { accepted: f64, rejected: f64 },
}

/// One environment interaction: the observation the actor saw, the action it
/// took, and the reward the environment returned for that action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    /// 1-based position within the episode.
    pub timestep: u32,
    /// Observation text presented to the actor before acting.
    pub state_text: String,
    /// Action text the actor emitted; never empty.
    pub action_text: String,
    /// Reward for this step; non-zero only on terminal steps in these
    /// environments.
    pub reward: f64,
}

/// A finished episode of one task attempt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub env_id: String,
    pub task_id: String,
    /// 1-based attempt number for this task within a run.
    pub trial_index: u32,
    pub steps: Vec<Step>,
    /// Terminal reward of the episode, in [0, 1]. Truncated episodes score
    /// the final non-terminal state, which is 0 in every environment here.
    pub episode_return: f64,
    /// True iff the episode terminated with a return at or above the
    /// environment's success threshold.
    pub success: bool,
}

impl Trajectory {
    /// Validates and builds a trajectory. See the module doc for invariants.
    pub fn new(
        env_id: impl Into<String>,
        task_id: impl Into<String>,
        trial_index: u32,
        steps: Vec<Step>,
        episode_return: f64,
        success: bool,
    ) -> Result<Self, CoreError> {
        if trial_index == 0 {
            return Err(CoreError::ZeroTrialIndex);
        }
        for (index, step) in steps.iter().enumerate() {
            let expected = (index + 1) as u32;
            if step.timestep != expected {
                return Err(CoreError::BadTimestep { index, got: step.timestep, expected });
            }
            if step.action_text.is_empty() {
                return Err(CoreError::EmptyAction { index });
            }
            if !(0.0..=1.0).contains(&step.reward) {
                return Err(CoreError::ValueOutOfRange { what: "step reward", value: step.reward });
            }
        }
        if !(0.0..=1.0).contains(&episode_return) || !episode_return.is_finite() {
            return Err(CoreError::ValueOutOfRange { what: "episode return", value: episode_return });
        }
        Ok(Self {
            env_id: env_id.into(),
            task_id: task_id.into(),
            trial_index,
            steps,
            episode_return,
            success,
        })
    }

    /// Number of steps taken.
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    /// True when the episode recorded no steps.
    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Renders steps as the line format shared by actor prompts and reflection
/// prompts:
///
/// ```text
/// Observation 1: ...
/// Action 1: ...
/// Reward 1: 0.0000
/// ```
///
/// Observation and action text never contain newlines, so the line structure
/// is parseable by prefix.
pub fn render_steps(steps: &[Step]) -> String {
    let mut out = String::new();
    for step in steps {
        out.push_str(&format!(
            "Observation {t}: {obs}\nAction {t}: {act}\nReward {t}: {r:.4}\n",
            t = step.timestep,
            obs = step.state_text,
            act = step.action_text,
            r = step.reward,
        ));
    }
    out
}

/// Rating of a reflection: the episode-return delta between the trial that
/// preceded it and the trial that followed it.
///
/// Both trajectories must describe the same (env, task) and must be
/// consecutive trials. Antisymmetric by construction: swapping the roles
/// negates the result.
pub fn compute_rating(before: &Trajectory, after: &Trajectory) -> Result<f64, CoreError> {
    if before.env_id != after.env_id || before.task_id != after.task_id {
        return Err(CoreError::IdentityMismatch(
            before.env_id.clone(),
            before.task_id.clone(),
            after.env_id.clone(),
            after.task_id.clone(),
        ));
    }
    if after.trial_index != before.trial_index + 1 {
        return Err(CoreError::TrialOrder {
            before: before.trial_index,
            after: after.trial_index,
        });
    }
    Ok(after.episode_return - before.episode_return)
}

/// One reflection response with the episode evidence around it. This is the
/// unit persisted in the replay buffer and consumed by every training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflectionRecord {
    pub env_id: String,
    pub task_id: String,
    /// Trial that failed and was reflected on; the response was active
    /// during trial `trial_index + 1`.
    pub trial_index: u32,
    /// Rendered reflection prompt the response was sampled for.
    pub instruction: String,
    /// Template id of the sampled response.
    pub response_id: usize,
    /// Rendered response text.
    pub response_text: String,
    /// Episode return of the failed trial.
    pub return_before: f64,
    /// Episode return of the following trial, with the response in memory.
    pub return_after: f64,
    /// Always `return_after - return_before`.
    pub rating: f64,
    /// Log-probability of the response under the policy that sampled it,
    /// evaluated at temperature 1. Lets PPO replay the buffer offline.
    pub old_logprob: f64,
}

impl ReflectionRecord {
    /// Builds a record, deriving the rating from the two returns.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        env_id: impl Into<String>,
        task_id: impl Into<String>,
        trial_index: u32,
        instruction: impl Into<String>,
        response_id: usize,
        response_text: impl Into<String>,
        return_before: f64,
        return_after: f64,
        old_logprob: f64,
    ) -> Result<Self, CoreError> {
        let record = Self {
            env_id: env_id.into(),
            task_id: task_id.into(),
            trial_index,
            instruction: instruction.into(),
            response_id,
            response_text: response_text.into(),
            return_before,
            return_after,
            rating: return_after - return_before,
            old_logprob,
        };
        record.validate()?;
        Ok(record)
    }

    /// Re-checks the record invariants; used on buffer append and read.
    pub fn validate(&self) -> Result<(), CoreError> {
        if self.trial_index == 0 {
            return Err(CoreError::ZeroTrialIndex);
        }
        for (what, value) in [
            ("return_before", self.return_before),
            ("return_after", self.return_after),
        ] {
            if !(0.0..=1.0).contains(&value) || !value.is_finite() {
                return Err(CoreError::ValueOutOfRange { what, value });
            }
        }
        let expected = self.return_after - self.return_before;
        if self.rating.to_bits() != expected.to_bits() {
            return Err(CoreError::RatingMismatch { stored: self.rating, expected });
        }
        Ok(())
    }
}

/// Two responses to the same failed trial, ordered by rating. The accepted
/// side strictly outrated the rejected side; ties never become pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    /// Shared reflection prompt both responses answered.
    pub instruction: String,
    pub accepted_id: usize,
    pub accepted_text: String,
    pub accepted_rating: f64,
    pub rejected_id: usize,
    pub rejected_text: String,
    pub rejected_rating: f64,
}

impl PreferencePair {
    /// Orders two rated responses into a pair; fails on a rating tie.
    pub fn from_records(a: &ReflectionRecord, b: &ReflectionRecord) -> Result<Self, CoreError> {
        if a.rating == b.rating {
            return Err(CoreError::NotStrictlyOrdered { accepted: a.rating, rejected: b.rating });
        }
        let (acc, rej) = if a.rating > b.rating { (a, b) } else { (b, a) };
        Ok(Self {
            instruction: acc.instruction.clone(),
            accepted_id: acc.response_id,
            accepted_text: acc.response_text.clone(),
            accepted_rating: acc.rating,
            rejected_id: rej.response_id,
            rejected_text: rej.response_text.clone(),
            rejected_rating: rej.rating,
        })
    }
}
