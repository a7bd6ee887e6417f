//! Deterministic task-set generation for all environment families.
//!
//! One task seed fixes everything: the world seed for each environment is
//! derived from it, candidate tasks are shuffled with it, and failure modes
//! are assigned round-robin over each environment's applicable mode list.
//! Every generated task is validated by a real `reset` against the world it
//! will run in before it is emitted.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashSet;

use super::synthhouse::HOUSE_OBJECTS;
use super::{
    build_env, EnvError, SynthHouseEnv, SynthQaEnv, SynthShopEnv, TaskSet, TaskSpec, TaskTruth,
    Transform, ENV_IDS, TASK_SET_SCHEMA,
};
use crate::actor::FailureMode;
use crate::util::derive_seed;

const QA_MODES: [FailureMode; 5] = [
    FailureMode::None,
    FailureMode::PrematureFinish,
    FailureMode::WrongEntity,
    FailureMode::LoopRepeat,
    FailureMode::MissedLookup,
];

const HOUSE_MODES: [FailureMode; 4] = [
    FailureMode::None,
    FailureMode::PrematureFinish,
    FailureMode::WrongEntity,
    FailureMode::LoopRepeat,
];

const SHOP_MODES: [FailureMode; 5] = [
    FailureMode::None,
    FailureMode::PrematureFinish,
    FailureMode::WrongOption,
    FailureMode::WrongEntity,
    FailureMode::LoopRepeat,
];

/// Queries guaranteed to match nothing in the shop catalog.
const SHOP_DISTRACTORS: [&str; 5] = [
    "antique gramophone needles",
    "vintage typewriter ribbon",
    "porcelain pocket watch",
    "brass telescope tripod",
    "velvet opera gloves",
];

/// World seed an environment uses under a given task seed.
pub fn canonical_world_seed(env_id: &str, task_seed: u64) -> u64 {
    derive_seed(task_seed, &["world", env_id])
}

/// Generates the train and validation splits for one environment.
pub fn generate_task_sets(
    env_id: &str,
    task_seed: u64,
    n_train: usize,
    n_val: usize,
) -> Result<(TaskSet, TaskSet), EnvError> {
    let world_seed = canonical_world_seed(env_id, task_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(task_seed, &["tasks", env_id]));
    let total = n_train + n_val;
    let (prefix, modes, raw): (char, &[FailureMode], Vec<(String, TaskTruth)>) = match env_id {
        "synthqa" => ('q', &QA_MODES, qa_candidates(world_seed, total, &mut rng)?),
        "synthhouse" => ('h', &HOUSE_MODES, house_candidates(world_seed, total, &mut rng)?),
        "synthshop" => ('s', &SHOP_MODES, shop_candidates(world_seed, total, &mut rng)?),
        other => return Err(EnvError::UnknownEnv { env_id: other.to_string() }),
    };

    let env = build_env(env_id, world_seed)?;
    let mut tasks = Vec::with_capacity(total);
    for (i, (goal_text, truth)) in raw.into_iter().enumerate() {
        let task = TaskSpec {
            env_id: env_id.to_string(),
            task_id: format!("{prefix}{:03}", i + 1),
            goal_text,
            failure_mode: modes[i % modes.len()],
            truth,
        };
        env.reset(&task, 0)?;
        tasks.push(task);
    }

    let val_tasks = tasks.split_off(n_train);
    let make = |split: &str, tasks: Vec<TaskSpec>| TaskSet {
        schema: TASK_SET_SCHEMA.to_string(),
        env_id: env_id.to_string(),
        world_seed,
        split: split.to_string(),
        tasks,
    };
    Ok((make("train", tasks), make("val", val_tasks)))
}

/// Generates both splits for every environment, in registry order.
pub fn generate_all_task_sets(
    task_seed: u64,
    n_train: usize,
    n_val: usize,
) -> Result<Vec<TaskSet>, EnvError> {
    let mut out = Vec::with_capacity(ENV_IDS.len() * 2);
    for env_id in ENV_IDS {
        let (train, val) = generate_task_sets(env_id, task_seed, n_train, n_val)?;
        out.push(train);
        out.push(val);
    }
    Ok(out)
}

fn qa_candidates(
    world_seed: u64,
    total: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(String, TaskTruth)>, EnvError> {
    let env = SynthQaEnv::new(world_seed);
    let mut candidates = env.candidates();
    if candidates.len() < total {
        return Err(EnvError::Generation(format!(
            "only {} qa questions available for {total} tasks",
            candidates.len()
        )));
    }
    candidates.shuffle(rng);
    Ok(candidates
        .into_iter()
        .take(total)
        .map(|c| {
            (
                c.question_text,
                TaskTruth::Qa {
                    entry_entity: c.entry_entity,
                    work_entity: c.work_entity,
                    lookup_keyword: c.lookup_keyword,
                    answer: c.answer,
                    distractor_query: c.distractor_query,
                },
            )
        })
        .collect())
}

fn house_candidates(
    world_seed: u64,
    total: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(String, TaskTruth)>, EnvError> {
    let env = SynthHouseEnv::new(world_seed);
    let rooms = env.rooms();
    let absent = env.absent_rooms();
    let transforms = [Transform::None, Transform::Clean, Transform::Heat, Transform::Cool];
    let mut seen: HashSet<(String, usize, usize, usize)> = HashSet::new();
    let mut out = Vec::with_capacity(total);
    let mut attempts = 0;
    while out.len() < total {
        attempts += 1;
        if attempts > 100_000 {
            return Err(EnvError::Generation("house candidate sampling stalled".into()));
        }
        let object = HOUSE_OBJECTS[rng.random_range(0..HOUSE_OBJECTS.len())].to_string();
        let si = rng.random_range(0..rooms.len());
        let ti = rng.random_range(0..rooms.len());
        if si == ti {
            continue;
        }
        let transform_idx = out.len() % transforms.len();
        if !seen.insert((object.clone(), si, ti, transform_idx)) {
            continue;
        }
        let transform = transforms[transform_idx];
        let source = rooms[si].clone();
        let target = rooms[ti].clone();
        let goal_text = match transform {
            Transform::None => {
                format!("Take the {object} from the {source} and put it in the {target}.")
            }
            Transform::Clean => {
                format!("Take the {object} from the {source}, clean it, and put it in the {target}.")
            }
            Transform::Heat => {
                format!("Take the {object} from the {source}, heat it, and put it in the {target}.")
            }
            Transform::Cool => {
                format!("Take the {object} from the {source}, cool it, and put it in the {target}.")
            }
        };
        let distractor_room = absent[out.len() % absent.len()].clone();
        out.push((
            goal_text,
            TaskTruth::House {
                object,
                source_room: source,
                target_room: target,
                transform,
                distractor_room,
            },
        ));
    }
    Ok(out)
}

fn shop_candidates(
    world_seed: u64,
    total: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(String, TaskTruth)>, EnvError> {
    let env = SynthShopEnv::new(world_seed);
    let mut combos: Vec<(usize, usize)> = (0..env.products().len())
        .flat_map(|p| (0..3).map(move |v| (p, v)))
        .collect();
    if combos.len() < total {
        return Err(EnvError::Generation(format!(
            "only {} shop combinations available for {total} tasks",
            combos.len()
        )));
    }
    combos.shuffle(rng);
    let mut out = Vec::with_capacity(total);
    for (i, (pi, vi)) in combos.into_iter().take(total).enumerate() {
        let p = &env.products()[pi];
        let option = p.option_values[vi].clone();
        let wrong_option = p.option_values[(vi + 1) % 3].clone();
        let price_limit = p.price + 10.0;
        let goal_text = format!(
            "Buy a {} {} with {} {}, under ${:.0}.",
            p.attribute, p.product_type, p.option_name, option, price_limit
        );
        out.push((
            goal_text,
            TaskTruth::Shop {
                search_query: format!("{} {}", p.attribute, p.product_type),
                product_title: p.title.clone(),
                product_type: p.product_type.clone(),
                attribute: p.attribute.clone(),
                option,
                wrong_option,
                price_limit,
                distractor_query: SHOP_DISTRACTORS[i % SHOP_DISTRACTORS.len()].to_string(),
            },
        ));
    }
    Ok(out)
}
