//! Desk-scale study of retrospective self-improvement for language agents.
//!
//! A frozen actor policy attempts tasks in small text environments. After a
//! failed episode, a trainable retrospective policy emits a verbal reflection
//! that is prepended to the actor's prompt for the next attempt. Reflections
//! are rated by the change in episode return they produce; the ratings drive
//! a preference-based reward model and a PPO loop with a KL anchor that tunes
//! the retrospective policy toward reflections that actually help.
//!
//! Module map:
//! - [`types`]: trajectories, reflection records, preference pairs, ratings.
//! - [`rewards`]: terminal reward functions for the three environments.
//! - [`envs`]: the environments (`synthqa`, `synthhouse`, `synthshop`),
//!   task generation, and the rollout loop.
//! - [`actor`]: prompt assembly, the scripted frozen actor, the remote client.
//! - [`retro`]: reflection prompts, the template library, the categorical
//!   retrospective policy, and its checkpoint format.
//! - [`buffer`]: the persistent JSONL replay buffer and preference building.
//! - [`rlhf`]: SFT warm start, reward-model fitting, PPO, and the
//!   three-stage offline pipeline.
//! - [`sampler`]: best-of-n reflection selection under the reward model.
//! - [`harness`]: evaluation, baseline comparison, reports, and config.

pub mod actor;
pub mod buffer;
pub mod envs;
pub mod harness;
pub mod retro;
pub mod rewards;
pub mod rlhf;
pub mod sampler;
pub mod types;
pub mod util;

pub use types::{compute_rating, CoreError, PreferencePair, ReflectionRecord, Step, Trajectory};
