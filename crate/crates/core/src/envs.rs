//! Scripted text environments and the rollout loop binding an actor to them.
//!
//! Three environment families share one interface:
//! - `synthqa`: two-hop question answering over a small entity graph, scored
//!   by token-level F1 on the final answer.
//! - `synthhouse`: object relocation across named rooms, scored by a binary
//!   goal predicate on the final put.
//! - `synthshop`: catalog search and purchase, scored by attribute, option,
//!   and price match against the goal.
//!
//! Worlds are pure functions of a world seed. Episode dynamics are fully
//! deterministic; the rollout seed is part of the interface for forward
//! compatibility and is ignored by these scripted worlds. Observations are
//! always single-line so that step renders stay line-structured.

mod synthhouse;
mod synthqa;
mod synthshop;
mod taskgen;

pub use synthhouse::SynthHouseEnv;
pub use synthqa::SynthQaEnv;
pub use synthshop::SynthShopEnv;
pub use taskgen::{canonical_world_seed, generate_all_task_sets, generate_task_sets};

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actor::{ActorError, ActorPolicy, FailureMode};
use crate::types::{CoreError, Step, Trajectory};

/// Schema tag written into every task-set file.
pub const TASK_SET_SCHEMA: &str = "task-set-v1";

/// All registered environment ids.
pub const ENV_IDS: [&str; 3] = ["synthqa", "synthhouse", "synthshop"];

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("unknown environment id {env_id:?}")]
    UnknownEnv { env_id: String },
    #[error("task {task_id} does not fit this world: {detail}")]
    TaskNotFound { task_id: String, detail: String },
    #[error("step called on a terminal state")]
    EpisodeOver,
    #[error("task-set schema mismatch: found {found:?}")]
    BadSchema { found: String },
    #[error("task generation failed: {0}")]
    Generation(String),
    #[error("serialization failed: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Object state change a household task may require before the final put.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    None,
    Clean,
    Heat,
    Cool,
}

/// Ground truth needed to run and score a task, tagged by environment family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskTruth {
    Qa {
        /// First-hop entity named in the question.
        entry_entity: String,
        /// Second-hop entity reached from the entry page.
        work_entity: String,
        /// Keyword whose lookup sentence holds the answer.
        lookup_keyword: String,
        answer: String,
        /// Query resolving to no entity; used by the wrong-entity behavior.
        distractor_query: String,
    },
    House {
        object: String,
        source_room: String,
        target_room: String,
        transform: Transform,
        /// Room name absent from this world.
        distractor_room: String,
    },
    Shop {
        search_query: String,
        product_title: String,
        product_type: String,
        attribute: String,
        /// Option value the goal asks for.
        option: String,
        /// A different valid option value of the same product.
        wrong_option: String,
        price_limit: f64,
        /// Query matching no product in the catalog.
        distractor_query: String,
    },
}

/// One runnable task: goal text shown to the actor, scoring truth, and the
/// scripted failure mode attached at generation time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub env_id: String,
    pub task_id: String,
    pub goal_text: String,
    pub failure_mode: FailureMode,
    pub truth: TaskTruth,
}

/// A split of tasks for one environment, reproducible from `world_seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSet {
    pub schema: String,
    pub env_id: String,
    pub world_seed: u64,
    pub split: String,
    pub tasks: Vec<TaskSpec>,
}

impl TaskSet {
    pub fn save(&self, path: &Path) -> Result<(), EnvError> {
        let mut body =
            serde_json::to_string_pretty(self).map_err(|e| EnvError::Format(e.to_string()))?;
        body.push('\n');
        std::fs::write(path, body)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EnvError> {
        let body = std::fs::read_to_string(path)?;
        let set: TaskSet =
            serde_json::from_str(&body).map_err(|e| EnvError::Format(e.to_string()))?;
        if set.schema != TASK_SET_SCHEMA {
            return Err(EnvError::BadSchema { found: set.schema });
        }
        Ok(set)
    }

    /// Looks a task up by id.
    pub fn task(&self, task_id: &str) -> Option<&TaskSpec> {
        self.tasks.iter().find(|t| t.task_id == task_id)
    }
}

/// Environment-specific episode state carried between steps.
#[derive(Debug, Clone, PartialEq)]
pub enum StatePayload {
    Qa(synthqa::QaState),
    House(synthhouse::HouseState),
    Shop(synthshop::ShopState),
}

/// Full episode state: what the actor sees plus the hidden payload.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub observation_text: String,
    pub terminal: bool,
    pub payload: StatePayload,
}

/// A scripted world. `reset` validates the task against the world; `step`
/// is a pure transition on `(state, action)`.
pub trait Environment: Send + Sync {
    fn env_id(&self) -> &'static str;
    fn default_max_steps(&self) -> u32;
    /// Episodes with return at or above this count as successes.
    fn success_threshold(&self) -> f64 {
        1.0
    }
    fn reset(&self, task: &TaskSpec, seed: u64) -> Result<EnvState, EnvError>;
    fn step(&self, state: &EnvState, action: &str) -> Result<(EnvState, f64), EnvError>;
}

/// Builds the environment registered under `env_id` with its world seed.
pub fn build_env(env_id: &str, world_seed: u64) -> Result<Box<dyn Environment>, EnvError> {
    match env_id {
        "synthqa" => Ok(Box::new(SynthQaEnv::new(world_seed))),
        "synthhouse" => Ok(Box::new(SynthHouseEnv::new(world_seed))),
        "synthshop" => Ok(Box::new(SynthShopEnv::new(world_seed))),
        other => Err(EnvError::UnknownEnv { env_id: other.to_string() }),
    }
}

/// Splits `verb[argument]` actions; returns `None` for anything else.
pub(crate) fn parse_action(action: &str) -> Option<(&str, &str)> {
    let action = action.trim();
    let open = action.find('[')?;
    let close = action.rfind(']')?;
    if close != action.len() - 1 || close < open {
        return None;
    }
    let verb = &action[..open];
    let arg = &action[open + 1..close];
    if verb.is_empty() {
        return None;
    }
    Some((verb, arg))
}

/// Per-rollout settings.
#[derive(Debug, Clone)]
pub struct RolloutOptions {
    pub max_steps: u32,
    pub prompt_budget: usize,
    /// Forwarded to `reset`; labels the rollout in deterministic worlds.
    pub seed: u64,
    /// 1-based trial number recorded on the trajectory.
    pub trial_index: u32,
}

impl RolloutOptions {
    /// Environment defaults with the standard prompt budget.
    pub fn for_env(env: &dyn Environment, seed: u64, trial_index: u32) -> Self {
        Self {
            max_steps: env.default_max_steps(),
            prompt_budget: crate::actor::DEFAULT_PROMPT_BUDGET,
            seed,
            trial_index,
        }
    }
}

#[derive(Debug, Error)]
pub enum RolloutError {
    /// The actor could not produce an action; completed steps are preserved.
    #[error("rollout aborted after {} steps: {source}", partial.len())]
    Aborted {
        partial: Vec<Step>,
        #[source]
        source: ActorError,
    },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Trajectory(#[from] CoreError),
}

/// Runs one episode of `actor` on `task` and packages it as a trajectory.
///
/// Each recorded step stores the observation the actor acted on (the state
/// before the action); terminal result text is never part of the record.
/// Success is `episode_return >= success_threshold`.
pub fn rollout(
    env: &dyn Environment,
    task: &TaskSpec,
    actor: &dyn ActorPolicy,
    reflections: &[String],
    options: &RolloutOptions,
) -> Result<Trajectory, RolloutError> {
    if task.env_id != env.env_id() {
        return Err(RolloutError::Env(EnvError::TaskNotFound {
            task_id: task.task_id.clone(),
            detail: format!("task targets environment {:?}", task.env_id),
        }));
    }
    let mut state = env.reset(task, options.seed)?;
    let mut steps: Vec<Step> = Vec::new();
    while (steps.len() as u32) < options.max_steps && !state.terminal {
        let prompt = crate::actor::assemble_prompt(
            &task.goal_text,
            &steps,
            &state.observation_text,
            reflections,
            options.prompt_budget,
        )
        .map_err(|source| RolloutError::Aborted { partial: steps.clone(), source })?;
        let action = actor
            .act(&prompt, task)
            .map_err(|source| RolloutError::Aborted { partial: steps.clone(), source })?;
        let (next, reward) = env.step(&state, &action)?;
        steps.push(Step {
            timestep: steps.len() as u32 + 1,
            state_text: state.observation_text.clone(),
            action_text: action,
            reward,
        });
        state = next;
    }
    let episode_return: f64 = steps.iter().map(|s| s.reward).sum();
    let success = episode_return >= env.success_threshold();
    Ok(Trajectory::new(
        env.env_id(),
        task.task_id.as_str(),
        options.trial_index,
        steps,
        episode_return,
        success,
    )?)
}
