//! Best-of-n reflection selection under the learned reward model.
//!
//! At evaluation time the retrospective policy can spend extra samples per
//! failure: draw `n` candidate reflections, score each with the reward model,
//! and keep the highest-scoring one. Ties go to the smallest template id so
//! repeated runs stay reproducible. Selection is used only when responding to
//! a failed episode during evaluation; training-data collection always uses
//! plain paired sampling.
//!
//! Determinism: the per-draw seeds are successive `u64`s from a single ChaCha8
//! stream seeded by `seed`, so the result is a pure function of
//! `(policy, reward model, library, prompt, n, temperature, seed)` and the
//! first `i` draws do not depend on `n`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::retro::{
    extract_features, sample_response, ReflectionPrompt, RetroError, RetroPolicy, TemplateLibrary,
};
use crate::rlhf::{RewardModel, RlhfError};

/// Default number of candidate draws per failure.
pub const DEFAULT_BEST_OF_N: usize = 4;

/// Ways best-of-n selection can fail.
#[derive(Debug, Error)]
pub enum SamplerError {
    /// `n = 0` leaves nothing to select from.
    #[error("best-of-n needs at least one draw")]
    NoDraws,
    /// Sampling from the policy failed.
    #[error(transparent)]
    Sampling(#[from] RetroError),
    /// Scoring a drawn response failed.
    #[error(transparent)]
    Scoring(#[from] RlhfError),
}

/// One candidate draw with its reward-model score attached.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredDraw {
    pub response_id: usize,
    pub response_text: String,
    /// Log-probability of the draw under the temperature-adjusted policy.
    pub logprob: f64,
    /// Reward-model score of this response for the prompt.
    pub score: f64,
}

/// Result of a best-of-n selection: the winner plus every draw that competed,
/// in draw order, so callers can audit the selection.
#[derive(Debug, Clone, PartialEq)]
pub struct BestOfN {
    pub response_id: usize,
    pub response_text: String,
    /// Reward-model score of the winner.
    pub score: f64,
    pub draws: Vec<ScoredDraw>,
}

/// Draws `n` reflections for `prompt` at `temperature`, scores each with the
/// reward model, and returns the highest-scoring one. Exact score ties break
/// toward the smaller template id.
#[allow(clippy::too_many_arguments)]
pub fn best_of_n(
    policy: &RetroPolicy,
    reward_model: &RewardModel,
    library: &TemplateLibrary,
    prompt: &ReflectionPrompt,
    n: usize,
    temperature: f64,
    seed: u64,
) -> Result<BestOfN, SamplerError> {
    if n == 0 {
        return Err(SamplerError::NoDraws);
    }
    let phi = extract_features(&prompt.rendered);
    let mut seeds = ChaCha8Rng::seed_from_u64(seed);
    let mut draws = Vec::with_capacity(n);
    for _ in 0..n {
        let draw_seed: u64 = seeds.random();
        let sample = sample_response(policy, library, prompt, temperature, draw_seed)?;
        let score = reward_model.score_features(&phi, sample.response_id)?;
        draws.push(ScoredDraw {
            response_id: sample.response_id,
            response_text: sample.response_text,
            logprob: sample.logprob,
            score,
        });
    }
    let mut winner = 0;
    for (i, draw) in draws.iter().enumerate().skip(1) {
        let best = &draws[winner];
        if draw.score > best.score
            || (draw.score == best.score && draw.response_id < best.response_id)
        {
            winner = i;
        }
    }
    let chosen = draws[winner].clone();
    Ok(BestOfN {
        response_id: chosen.response_id,
        response_text: chosen.response_text,
        score: chosen.score,
        draws,
    })
}
