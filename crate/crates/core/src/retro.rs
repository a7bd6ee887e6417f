//! The trainable retrospective policy and its reflection machinery.
//!
//! The policy is a conditional categorical distribution over a fixed library
//! of reflection templates. A failed trajectory is rendered into a
//! [`ReflectionPrompt`] `x`, a deterministic extractor maps the prompt text
//! to a vector of failure-signal indicators `phi(x)`, and the policy scores
//! template `k` with a linear logit:
//!
//! ```text
//! pi_theta(k | x) = softmax_k( sum_f theta[f, k] * phi_f(x) )
//! ```
//!
//! `theta` has one weight per (feature, template) cell, equivalent to a
//! linear model over the tensor-product features `phi(x) (x) onehot(k)`.
//! A frozen copy of the initialization is kept as the reference distribution
//! so the KL anchor used during policy optimization is exact:
//!
//! ```text
//! KL(pi_theta(.|x) || pi_ref(.|x)) = sum_k pi_theta(k|x) ln(pi_theta(k|x) / pi_ref(k|x))
//! ```
//!
//! Sampling at a temperature draws from `softmax(logits / T)` using a
//! counter-based RNG, so a (policy, prompt, temperature, seed) tuple always
//! reproduces the same draw.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actor::FailureMode;
use crate::types::{render_steps, Trajectory};

/// Width of the failure-signal feature vector.
pub const NUM_FEATURES: usize = 12;

/// Fixed instruction appended to every reflection prompt.
pub const REFLECTION_INSTRUCTION: &str = "The attempt above failed. Identify the root cause of \
the failure and state one corrective insight to apply on the next attempt. Begin your answer \
with 'Reflection:'.";

/// Errors from reflection-prompt construction, policy evaluation, sampling,
/// and checkpoint IO.
#[derive(Debug, Error)]
pub enum RetroError {
    /// Reflection prompts are built from failed episodes only.
    #[error("trajectory for task {0} succeeded; nothing to reflect on")]
    NotAFailure(String),
    /// Sampling temperature must be finite and positive.
    #[error("invalid sampling temperature {0}; must be finite and > 0")]
    InvalidTemperature(f64),
    /// A probability, logit, or parameter became non-finite.
    #[error("numerical error: {0}")]
    Numerical(String),
    /// Feature vector width does not match the policy.
    #[error("feature dimension mismatch: policy expects {expected}, got {got}")]
    FeatureDim { expected: usize, got: usize },
    /// Template id outside the policy's range.
    #[error("template id {id} out of range for {count} templates")]
    TemplateOutOfRange { id: usize, count: usize },
    /// Library and policy disagree on the number of templates.
    #[error("library has {library} templates but policy has {policy}")]
    LibraryMismatch { library: usize, policy: usize },
    /// Malformed checkpoint or template-library file.
    #[error("bad file format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// Reflection prompts and failure-signal features
// ---------------------------------------------------------------------------

/// Rendered input to the retrospective policy: the failed episode, its
/// return, and the fixed instruction.
#[derive(Debug, Clone, PartialEq)]
pub struct ReflectionPrompt {
    /// Line-structured [observation, action, reward] history.
    pub trajectory_render: String,
    /// "Episode return: X.XXXX".
    pub return_text: String,
    /// [`REFLECTION_INSTRUCTION`].
    pub instruction_text: String,
    /// Full prompt: trajectory, return line, instruction.
    pub rendered: String,
}

/// Builds the reflection prompt for a failed episode. Succeeded episodes are
/// rejected: only failures are reflected on.
pub fn build_reflection_prompt(trajectory: &Trajectory) -> Result<ReflectionPrompt, RetroError> {
    if trajectory.success {
        return Err(RetroError::NotAFailure(trajectory.task_id.clone()));
    }
    let trajectory_render = render_steps(&trajectory.steps);
    let return_text = format!("Episode return: {:.4}", trajectory.episode_return);
    let rendered = format!("{trajectory_render}{return_text}\n{REFLECTION_INSTRUCTION}");
    Ok(ReflectionPrompt {
        trajectory_render,
        return_text,
        instruction_text: REFLECTION_INSTRUCTION.to_string(),
        rendered,
    })
}

/// Parsed view of a rendered prompt: action texts, observation texts, and
/// the episode return, recovered from the line structure.
#[derive(Debug, Default)]
pub struct ParsedPrompt {
    pub actions: Vec<String>,
    pub observations: Vec<String>,
    pub episode_return: Option<f64>,
}

/// Recovers actions, observations, and the return from rendered prompt text.
/// Environments never emit newlines inside observations, so line prefixes
/// identify the parts unambiguously.
pub fn parse_prompt_text(text: &str) -> ParsedPrompt {
    let mut parsed = ParsedPrompt::default();
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix("Action ") {
            if let Some((_, body)) = rest.split_once(": ") {
                parsed.actions.push(body.to_string());
            }
        } else if let Some(rest) = line.strip_prefix("Observation ") {
            if let Some((_, body)) = rest.split_once(": ") {
                parsed.observations.push(body.to_string());
            }
        } else if let Some(rest) = line.strip_prefix("Episode return: ") {
            if let Ok(v) = rest.trim().parse::<f64>() {
                parsed.episode_return = Some(v);
            }
        }
    }
    parsed
}

/// Deterministic failure-signal features of a rendered reflection prompt.
///
/// Every entry is a 0/1 indicator of one concrete failure symptom. Each
/// indicator is a conjunction precise enough that it fires for exactly one
/// kind of mistake: no indicator is shared between two trajectories whose
/// correct fixes differ. That exclusivity matters for the preference-trained
/// scorer downstream: pairwise logistic fitting only constrains responses
/// that were actually compared on a prompt, so any feature row shared
/// between two symptom classes would let wins earned in one class inflate a
/// response's score on prompts of the other class, where no comparison pins
/// it down. With disjoint rows, one observed win inside a symptom class
/// fixes that class's ranking and cannot perturb any other class.
pub fn extract_features(prompt_text: &str) -> Vec<f64> {
    let parsed = parse_prompt_text(prompt_text);
    let actions = &parsed.actions;
    let obs = &parsed.observations;
    let ret = parsed.episode_return.unwrap_or(0.0);

    let searches = actions.iter().filter(|a| a.starts_with("Search[")).count();
    let lookups = actions.iter().filter(|a| a.starts_with("Lookup[")).count();
    let chooses = actions.iter().filter(|a| a.starts_with("Choose[")).count();
    let has_finish = actions.iter().any(|a| a.starts_with("Finish["));
    let has_buy = actions.iter().any(|a| a == "Choose[buy]");
    let repeated = actions.windows(2).any(|w| w[0] == w[1]);
    let repeated_goto = actions.windows(2).any(|w| w[0] == w[1] && w[0].starts_with("goto["));
    let obs_contains = |needle: &str| obs.iter().any(|o| o.contains(needle));

    let features = [
        // 0: answered after a single search (stopped one hop early).
        bool_f(searches == 1 && lookups == 0 && has_finish),
        // 1: bought straight from the item page without picking an option.
        bool_f(has_buy && chooses == 2),
        // 2: moves that changed nothing, with nothing reported missing.
        bool_f(obs_contains("Nothing happens") && !obs_contains("There is no") && !repeated),
        // 3: a search or query named something that does not exist.
        bool_f(obs_contains("Could not find")),
        // 4: tried to act on something absent from the current room.
        bool_f(obs_contains("There is no")),
        // 5: an action was repeated back to back.
        bool_f(repeated),
        // 6: kept pulling up search results without ever choosing one.
        bool_f(searches >= 2 && chooses == 0 && obs_contains("Results:")),
        // 7: walked into the same room twice in a row.
        bool_f(repeated_goto),
        // 8: multi-hop search with an answer, but the detail was never looked up.
        bool_f(searches >= 2 && lookups == 0 && has_finish),
        // 9: bought with an option picked, yet the purchase fell short.
        bool_f(has_buy && chooses >= 3 && ret < 1.0),
        // 10: fiddled with containers instead of finishing the task.
        bool_f(actions.iter().any(|a| a.starts_with("open[") || a.starts_with("close["))),
        // 11: retried a failing query under numbered attempt suffixes.
        bool_f(actions.iter().any(|a| a.contains(" attempt "))),
    ];
    debug_assert_eq!(features.len(), NUM_FEATURES);
    features.to_vec()
}

fn bool_f(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

// ---------------------------------------------------------------------------
// Template library
// ---------------------------------------------------------------------------

/// One reflection template. `pattern` may contain `{first_action}` and
/// `{last_action}` slots filled from the failed trajectory at render time.
/// `marker` is a fixed substring of the pattern that survives slot filling;
/// the scripted actor recognizes templates in memory by marker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflectionTemplate {
    pub id: usize,
    pub pattern: String,
    pub marker: String,
    /// Failure mode this template corrects, if any.
    pub corrects: Option<FailureMode>,
    /// Failure mode this template induces when present in memory, if any.
    pub harms: Option<FailureMode>,
}

/// The fixed template library the categorical policy samples from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateLibrary {
    pub schema: String,
    pub templates: Vec<ReflectionTemplate>,
}

/// Schema tag for template-library JSON files.
pub const TEMPLATE_SCHEMA: &str = "template-library-v1";

impl TemplateLibrary {
    /// The built-in eight-template library: one corrective per failure mode,
    /// one harmful template, two inert ones.
    pub fn builtin() -> Self {
        let t = |id, pattern: &str, marker: &str, corrects, harms| ReflectionTemplate {
            id,
            pattern: pattern.to_string(),
            marker: marker.to_string(),
            corrects,
            harms,
        };
        let lib = Self {
            schema: TEMPLATE_SCHEMA.to_string(),
            templates: vec![
                t(
                    0,
                    "Reflection: I stopped too early; my last action was '{last_action}'. On the \
                     next attempt I will carry out every required step and finish only after the \
                     final step is done.",
                    "finish only after the final step",
                    Some(FailureMode::PrematureFinish),
                    None,
                ),
                t(
                    1,
                    "Reflection: I pursued the wrong name; I started with '{first_action}'. On \
                     the next attempt I will target exactly what the goal names.",
                    "exactly what the goal names",
                    Some(FailureMode::WrongEntity),
                    None,
                ),
                t(
                    2,
                    "Reflection: I kept doing the same thing; '{last_action}' changed nothing. \
                     On the next attempt I will never repeat an action that did not change the \
                     observation.",
                    "never repeat an action",
                    Some(FailureMode::LoopRepeat),
                    None,
                ),
                t(
                    3,
                    "Reflection: I answered without checking the detail. On the next attempt I \
                     will use Lookup to confirm the exact fact before finishing.",
                    "use Lookup to confirm",
                    Some(FailureMode::MissedLookup),
                    None,
                ),
                t(
                    4,
                    "Reflection: I bought the item without setting the option. On the next \
                     attempt I will select the requested option before buying.",
                    "select the requested option",
                    Some(FailureMode::WrongOption),
                    None,
                ),
                t(
                    5,
                    "Reflection: The plan was right. On the next attempt I will repeat the \
                     exact same sequence of actions, only more carefully.",
                    "repeat the exact same sequence",
                    None,
                    Some(FailureMode::LoopRepeat),
                ),
                t(
                    6,
                    "Reflection: The task was harder than expected. Next time, more effort.",
                    "harder than expected",
                    None,
                    None,
                ),
                t(
                    7,
                    "Reflection: I will think step by step and stay focused on the goal.",
                    "think step by step",
                    None,
                    None,
                ),
            ],
        };
        lib.validate().expect("built-in library is valid");
        lib
    }

    /// Number of templates; the policy's category count.
    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    /// Checks ids are 0..n in order, markers are non-empty, appear in their
    /// own pattern, and are unique across templates, and that no failure
    /// mode has two correctives.
    pub fn validate(&self) -> Result<(), RetroError> {
        if self.schema != TEMPLATE_SCHEMA {
            return Err(RetroError::Format(format!(
                "unknown template schema {:?}",
                self.schema
            )));
        }
        if self.templates.is_empty() {
            return Err(RetroError::Format("library has no templates".into()));
        }
        let mut seen_correctives = Vec::new();
        for (i, t) in self.templates.iter().enumerate() {
            if t.id != i {
                return Err(RetroError::Format(format!(
                    "template at position {i} has id {}",
                    t.id
                )));
            }
            if t.marker.is_empty() || !t.pattern.contains(&t.marker) {
                return Err(RetroError::Format(format!(
                    "template {i}: marker must be a non-empty substring of its pattern"
                )));
            }
            for other in &self.templates {
                if other.id != t.id && other.pattern.contains(&t.marker) {
                    return Err(RetroError::Format(format!(
                        "marker of template {} also appears in template {}",
                        t.id, other.id
                    )));
                }
            }
            if let Some(mode) = t.corrects {
                if seen_correctives.contains(&mode) {
                    return Err(RetroError::Format(format!(
                        "two templates correct failure mode {mode:?}"
                    )));
                }
                seen_correctives.push(mode);
            }
        }
        Ok(())
    }

    /// Renders template `id` against a reflection prompt, filling action
    /// slots from the trajectory.
    pub fn render(&self, id: usize, prompt: &ReflectionPrompt) -> Result<String, RetroError> {
        let template = self
            .templates
            .get(id)
            .ok_or(RetroError::TemplateOutOfRange { id, count: self.len() })?;
        let parsed = parse_prompt_text(&prompt.trajectory_render);
        let first = parsed
            .actions
            .first()
            .cloned()
            .unwrap_or_else(|| "my first action".to_string());
        let last = parsed
            .actions
            .last()
            .cloned()
            .unwrap_or_else(|| "my last action".to_string());
        Ok(template
            .pattern
            .replace("{first_action}", &first)
            .replace("{last_action}", &last))
    }

    /// The template correcting `mode`, if the library has one.
    pub fn corrective_for(&self, mode: FailureMode) -> Option<&ReflectionTemplate> {
        self.templates.iter().find(|t| t.corrects == Some(mode))
    }

    /// True when `text` is a rendering of a template that corrects `mode`.
    pub fn text_corrects(&self, text: &str, mode: FailureMode) -> bool {
        self.corrective_for(mode)
            .map(|t| text.contains(&t.marker))
            .unwrap_or(false)
    }

    /// True when `text` is a rendering of a harmful template.
    pub fn text_is_harmful(&self, text: &str) -> bool {
        self.templates
            .iter()
            .any(|t| t.harms.is_some() && text.contains(&t.marker))
    }

    pub fn save(&self, path: &Path) -> Result<(), RetroError> {
        let mut body = serde_json::to_string_pretty(self)
            .map_err(|e| RetroError::Format(e.to_string()))?;
        body.push('\n');
        fs::write(path, body)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, RetroError> {
        let body = fs::read_to_string(path)?;
        let lib: Self =
            serde_json::from_str(&body).map_err(|e| RetroError::Format(e.to_string()))?;
        lib.validate()?;
        Ok(lib)
    }
}

// ---------------------------------------------------------------------------
// Softmax policy math over a flat parameter vector
// ---------------------------------------------------------------------------
//
// The math is exposed as free functions of the raw parameter slice so
// finite-difference checks and optimizers can evaluate and perturb theta
// directly. Layout is row-major: theta[f * num_templates + k].

/// Logits for all templates at features `phi`.
pub fn logits(theta: &[f64], phi: &[f64], num_templates: usize) -> Vec<f64> {
    let mut z = vec![0.0; num_templates];
    for (f, &x) in phi.iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        let row = &theta[f * num_templates..(f + 1) * num_templates];
        for (k, zk) in z.iter_mut().enumerate() {
            *zk += row[k] * x;
        }
    }
    z
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| (v - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `ln pi_theta(k | phi)` at temperature 1, numerically stable.
pub fn log_softmax_prob(theta: &[f64], phi: &[f64], num_templates: usize, k: usize) -> f64 {
    let z = logits(theta, phi, num_templates);
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum: f64 = z.iter().map(|&v| (v - m).exp()).sum::<f64>().ln() + m;
    z[k] - log_sum
}

/// Gradient of `ln pi_theta(k | phi)` with respect to every theta cell:
/// `d/d theta[f, k'] = phi_f * (1[k' == k] - pi(k'))`.
pub fn grad_log_softmax_prob(
    theta: &[f64],
    phi: &[f64],
    num_templates: usize,
    k: usize,
) -> Vec<f64> {
    let probs = softmax(&logits(theta, phi, num_templates));
    let mut grad = vec![0.0; theta.len()];
    for (f, &x) in phi.iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        for (kp, &p) in probs.iter().enumerate() {
            let indicator = if kp == k { 1.0 } else { 0.0 };
            grad[f * num_templates + kp] = x * (indicator - p);
        }
    }
    grad
}

// ---------------------------------------------------------------------------
// RetroPolicy
// ---------------------------------------------------------------------------

/// The conditional categorical policy over reflection templates, plus the
/// frozen reference parameters captured at initialization.
#[derive(Debug, Clone, PartialEq)]
pub struct RetroPolicy {
    theta: Vec<f64>,
    reference_theta: Vec<f64>,
    num_features: usize,
    num_templates: usize,
}

impl RetroPolicy {
    /// Uniform-initialized policy over `num_templates` templates with the
    /// standard feature extractor width. The zero parameters double as the
    /// frozen reference, so the reference distribution is uniform.
    pub fn new_uniform(num_templates: usize) -> Self {
        let theta = vec![0.0; NUM_FEATURES * num_templates];
        Self {
            reference_theta: theta.clone(),
            theta,
            num_features: NUM_FEATURES,
            num_templates,
        }
    }

    /// Builds a policy from explicit parts; used by tests and checkpoint
    /// loading. The reference stays whatever is passed in and is never
    /// mutated afterwards.
    pub fn from_parts(
        theta: Vec<f64>,
        reference_theta: Vec<f64>,
        num_features: usize,
        num_templates: usize,
    ) -> Result<Self, RetroError> {
        let expected = num_features * num_templates;
        if theta.len() != expected || reference_theta.len() != expected {
            return Err(RetroError::FeatureDim { expected, got: theta.len() });
        }
        Ok(Self { theta, reference_theta, num_features, num_templates })
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn num_templates(&self) -> usize {
        self.num_templates
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn reference_theta(&self) -> &[f64] {
        &self.reference_theta
    }

    /// Replaces the trainable parameters, keeping the frozen reference.
    pub fn with_theta(&self, theta: Vec<f64>) -> Result<Self, RetroError> {
        if theta.len() != self.theta.len() {
            return Err(RetroError::FeatureDim { expected: self.theta.len(), got: theta.len() });
        }
        Ok(Self {
            theta,
            reference_theta: self.reference_theta.clone(),
            num_features: self.num_features,
            num_templates: self.num_templates,
        })
    }

    fn check_phi(&self, phi: &[f64]) -> Result<(), RetroError> {
        if phi.len() != self.num_features {
            return Err(RetroError::FeatureDim { expected: self.num_features, got: phi.len() });
        }
        Ok(())
    }

    /// Template distribution at features `phi`, temperature 1.
    pub fn probs_for_features(&self, phi: &[f64]) -> Result<Vec<f64>, RetroError> {
        self.check_phi(phi)?;
        let z = logits(&self.theta, phi, self.num_templates);
        if z.iter().any(|v| !v.is_finite()) {
            return Err(RetroError::Numerical("non-finite logit".into()));
        }
        Ok(softmax(&z))
    }

    /// Reference-distribution counterpart of [`Self::probs_for_features`].
    pub fn reference_probs_for_features(&self, phi: &[f64]) -> Result<Vec<f64>, RetroError> {
        self.check_phi(phi)?;
        let z = logits(&self.reference_theta, phi, self.num_templates);
        if z.iter().any(|v| !v.is_finite()) {
            return Err(RetroError::Numerical("non-finite reference logit".into()));
        }
        Ok(softmax(&z))
    }

    /// Template distribution for a reflection prompt.
    pub fn policy_probs(&self, prompt: &ReflectionPrompt) -> Result<Vec<f64>, RetroError> {
        self.probs_for_features(&extract_features(&prompt.rendered))
    }

    /// `ln pi_theta(k | phi)` at temperature 1.
    pub fn log_prob_for_features(&self, phi: &[f64], k: usize) -> Result<f64, RetroError> {
        self.check_phi(phi)?;
        if k >= self.num_templates {
            return Err(RetroError::TemplateOutOfRange { id: k, count: self.num_templates });
        }
        Ok(log_softmax_prob(&self.theta, phi, self.num_templates, k))
    }

    /// KL divergence from the current distribution to the reference at
    /// features `phi`. Zero exactly when theta equals the reference.
    pub fn kl_for_features(&self, phi: &[f64]) -> Result<f64, RetroError> {
        let p = self.probs_for_features(phi)?;
        let q = self.reference_probs_for_features(phi)?;
        let mut kl = 0.0;
        for (pk, qk) in p.iter().zip(q.iter()) {
            if *pk > 0.0 {
                kl += pk * (pk / qk).ln();
            }
        }
        if !kl.is_finite() {
            return Err(RetroError::Numerical("non-finite KL".into()));
        }
        Ok(kl)
    }

    /// KL divergence to the reference for a reflection prompt.
    pub fn kl_to_reference(&self, prompt: &ReflectionPrompt) -> Result<f64, RetroError> {
        self.kl_for_features(&extract_features(&prompt.rendered))
    }
}

/// A sampled reflection: template id, rendered text, and the log-probability
/// of the draw under the temperature-adjusted distribution it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledReflection {
    pub response_id: usize,
    pub response_text: String,
    /// `ln softmax(logits / temperature)[response_id]`.
    pub logprob: f64,
}

/// Samples a reflection for `prompt` at the given temperature.
///
/// Deterministic in (policy, prompt, temperature, rng_seed): the draw uses a
/// counter-based generator seeded by `rng_seed` alone.
pub fn sample_response(
    policy: &RetroPolicy,
    library: &TemplateLibrary,
    prompt: &ReflectionPrompt,
    temperature: f64,
    rng_seed: u64,
) -> Result<SampledReflection, RetroError> {
    if !temperature.is_finite() || temperature <= 0.0 {
        return Err(RetroError::InvalidTemperature(temperature));
    }
    if library.len() != policy.num_templates() {
        return Err(RetroError::LibraryMismatch {
            library: library.len(),
            policy: policy.num_templates(),
        });
    }
    let phi = extract_features(&prompt.rendered);
    policy.check_phi(&phi)?;
    let z = logits(&policy.theta, &phi, policy.num_templates);
    if z.iter().any(|v| !v.is_finite()) {
        return Err(RetroError::Numerical("non-finite logit".into()));
    }
    let tempered: Vec<f64> = z.iter().map(|v| v / temperature).collect();
    let probs = softmax(&tempered);
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let u: f64 = rng.random();
    let mut cumulative = 0.0;
    let mut drawn = probs.len() - 1;
    for (k, p) in probs.iter().enumerate() {
        cumulative += p;
        if u < cumulative {
            drawn = k;
            break;
        }
    }
    Ok(SampledReflection {
        response_id: drawn,
        response_text: library.render(drawn, prompt)?,
        logprob: probs[drawn].ln(),
    })
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// Checkpoint header tag shared by policy and reward-model files.
pub const CHECKPOINT_MAGIC: &str = "retrospect-checkpoint";
/// Checkpoint format version.
pub const CHECKPOINT_VERSION: u32 = 1;

/// Kind field distinguishing the two checkpoint flavors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    Policy,
    RewardModel,
}

impl fmt::Display for CheckpointKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointKind::Policy => write!(f, "policy"),
            CheckpointKind::RewardModel => write!(f, "reward-model"),
        }
    }
}

/// Writes a flat-array checkpoint: a header line with kind and dimensions,
/// then one line of values per array. Floats use the shortest representation
/// that round-trips bit-exactly, so identical parameters always produce
/// byte-identical files.
pub fn write_checkpoint(
    path: &Path,
    kind: CheckpointKind,
    num_features: usize,
    num_templates: usize,
    arrays: &[&[f64]],
) -> Result<(), RetroError> {
    for arr in arrays {
        if arr.iter().any(|v| !v.is_finite()) {
            return Err(RetroError::Numerical("refusing to checkpoint non-finite values".into()));
        }
        if arr.len() != num_features * num_templates {
            return Err(RetroError::Format(format!(
                "array length {} does not match {num_features}x{num_templates}",
                arr.len()
            )));
        }
    }
    let mut out = String::new();
    out.push_str(&format!(
        "{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION} {kind} features={num_features} templates={num_templates}\n"
    ));
    for arr in arrays {
        let mut line = String::new();
        for (i, v) in arr.iter().enumerate() {
            if i > 0 {
                line.push(' ');
            }
            line.push_str(&format!("{v:?}"));
        }
        out.push_str(&line);
        out.push('\n');
    }
    let mut file = fs::File::create(path)?;
    file.write_all(out.as_bytes())?;
    Ok(())
}

/// Reads a checkpoint written by [`write_checkpoint`], returning the
/// dimensions and the arrays.
pub fn read_checkpoint(
    path: &Path,
    expected_kind: CheckpointKind,
) -> Result<(usize, usize, Vec<Vec<f64>>), RetroError> {
    let body = fs::read_to_string(path)?;
    let mut lines = body.lines();
    let header = lines
        .next()
        .ok_or_else(|| RetroError::Format("empty checkpoint".into()))?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 5 || parts[0] != CHECKPOINT_MAGIC {
        return Err(RetroError::Format(format!("bad checkpoint header {header:?}")));
    }
    if parts[1] != format!("v{CHECKPOINT_VERSION}") {
        return Err(RetroError::Format(format!("unsupported checkpoint version {}", parts[1])));
    }
    if parts[2] != expected_kind.to_string() {
        return Err(RetroError::Format(format!(
            "checkpoint kind {:?} but expected {expected_kind}",
            parts[2]
        )));
    }
    let dim = |field: &str, name: &str| -> Result<usize, RetroError> {
        field
            .strip_prefix(&format!("{name}="))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| RetroError::Format(format!("bad {name} field {field:?}")))
    };
    let num_features = dim(parts[3], "features")?;
    let num_templates = dim(parts[4], "templates")?;
    let mut arrays = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let mut arr = Vec::with_capacity(num_features * num_templates);
        for token in line.split(' ') {
            arr.push(
                token
                    .parse::<f64>()
                    .map_err(|_| RetroError::Format(format!("bad float {token:?}")))?,
            );
        }
        if arr.len() != num_features * num_templates {
            return Err(RetroError::Format(format!(
                "array has {} values, expected {}",
                arr.len(),
                num_features * num_templates
            )));
        }
        arrays.push(arr);
    }
    Ok((num_features, num_templates, arrays))
}

/// Saves a policy: header plus trainable and reference arrays.
pub fn save_policy(policy: &RetroPolicy, path: &Path) -> Result<(), RetroError> {
    write_checkpoint(
        path,
        CheckpointKind::Policy,
        policy.num_features,
        policy.num_templates,
        &[&policy.theta, &policy.reference_theta],
    )
}

/// Loads a policy checkpoint saved by [`save_policy`].
pub fn load_policy(path: &Path) -> Result<RetroPolicy, RetroError> {
    let (num_features, num_templates, arrays) = read_checkpoint(path, CheckpointKind::Policy)?;
    if arrays.len() != 2 {
        return Err(RetroError::Format(format!(
            "policy checkpoint has {} arrays, expected 2",
            arrays.len()
        )));
    }
    let mut iter = arrays.into_iter();
    RetroPolicy::from_parts(
        iter.next().expect("checked"),
        iter.next().expect("checked"),
        num_features,
        num_templates,
    )
}
