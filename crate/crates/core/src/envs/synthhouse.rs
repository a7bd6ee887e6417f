//! Household relocation environment on a grid of named rooms.
//!
//! The world samples 25 of a 33-room pool onto a 5-by-5 grid; the remaining
//! 8 names exist only as distractors. A task asks the agent to fetch an
//! object from its source room, optionally clean, heat, or cool it, and put
//! it down in a target room. Reward is binary and paid only by a put that
//! satisfies the full goal predicate, which also ends the episode.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    parse_action, EnvError, EnvState, Environment, StatePayload, TaskSpec, TaskTruth, Transform,
};
use crate::rewards::binary_reward;

const ROOM_POOL: [&str; 33] = [
    "hallway", "kitchen", "pantry", "dining room", "living room", "bedroom", "bathroom", "study",
    "garage", "attic", "cellar", "laundry room", "nursery", "office", "library", "sunroom",
    "porch", "workshop", "greenhouse", "guest room", "closet", "mudroom", "balcony",
    "storage room", "game room", "ballroom", "dungeon", "observatory", "vault", "courtyard",
    "solarium", "armory", "chapel",
];

/// Objects referenced by generated tasks.
pub const HOUSE_OBJECTS: [&str; 25] = [
    "mug", "plate", "knife", "apple", "towel", "book", "lamp", "pillow", "pan", "egg", "tomato",
    "cup", "vase", "candle", "sponge", "bottle", "bowl", "spoon", "jar", "basket", "cloth",
    "brush", "kettle", "tray", "scarf",
];

const GRID_SIDE: usize = 5;

/// Hidden per-episode state: agent and object placement plus the applied
/// transforms, alongside the goal fields needed to judge a put.
#[derive(Debug, Clone, PartialEq)]
pub struct HouseState {
    object: String,
    target_room: String,
    transform: Transform,
    agent_room: String,
    /// `None` while the agent holds the object.
    object_room: Option<String>,
    holding: bool,
    cleaned: bool,
    heated: bool,
    cooled: bool,
}

pub struct SynthHouseEnv {
    rooms: Vec<String>,
    absent: Vec<String>,
    start_room: String,
}

impl SynthHouseEnv {
    pub fn new(world_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(world_seed);
        let mut pool: Vec<&str> = ROOM_POOL.to_vec();
        pool.shuffle(&mut rng);
        let rooms: Vec<String> =
            pool[..GRID_SIDE * GRID_SIDE].iter().map(|r| r.to_string()).collect();
        let absent: Vec<String> =
            pool[GRID_SIDE * GRID_SIDE..].iter().map(|r| r.to_string()).collect();
        let start_room = rooms[0].clone();
        Self { rooms, absent, start_room }
    }

    /// Rooms present in this world, in grid row-major order.
    pub fn rooms(&self) -> &[String] {
        &self.rooms
    }

    /// Room names from the shared pool that this world left out.
    pub fn absent_rooms(&self) -> &[String] {
        &self.absent
    }

    fn has_room(&self, name: &str) -> bool {
        let needle = name.trim().to_lowercase();
        self.rooms.contains(&needle)
    }

    fn goal_satisfied(state: &HouseState) -> bool {
        let transformed = match state.transform {
            Transform::None => true,
            Transform::Clean => state.cleaned,
            Transform::Heat => state.heated,
            Transform::Cool => state.cooled,
        };
        state.agent_room == state.target_room && transformed
    }
}

impl Environment for SynthHouseEnv {
    fn env_id(&self) -> &'static str {
        "synthhouse"
    }

    fn default_max_steps(&self) -> u32 {
        20
    }

    fn reset(&self, task: &TaskSpec, _seed: u64) -> Result<EnvState, EnvError> {
        let mismatch = |detail: String| EnvError::TaskNotFound {
            task_id: task.task_id.clone(),
            detail,
        };
        let TaskTruth::House { object, source_room, target_room, transform, distractor_room } =
            &task.truth
        else {
            return Err(mismatch("truth is not a house record".into()));
        };
        if !self.has_room(source_room) {
            return Err(mismatch(format!("source room {source_room:?} not in this world")));
        }
        if !self.has_room(target_room) {
            return Err(mismatch(format!("target room {target_room:?} not in this world")));
        }
        if source_room == target_room {
            return Err(mismatch("source and target room coincide".into()));
        }
        if self.has_room(distractor_room) {
            return Err(mismatch(format!("distractor room {distractor_room:?} exists")));
        }
        if object.trim().is_empty() {
            return Err(mismatch("empty object name".into()));
        }
        let state = HouseState {
            object: object.clone(),
            target_room: target_room.clone(),
            transform: *transform,
            agent_room: self.start_room.clone(),
            object_room: Some(source_room.clone()),
            holding: false,
            cleaned: false,
            heated: false,
            cooled: false,
        };
        let here = if state.object_room.as_deref() == Some(self.start_room.as_str()) {
            format!(" You see a {object} here.")
        } else {
            String::new()
        };
        Ok(EnvState {
            observation_text: format!(
                "You are in the {}.{here} Your task: {}",
                self.start_room, task.goal_text
            ),
            terminal: false,
            payload: StatePayload::House(state),
        })
    }

    fn step(&self, state: &EnvState, action: &str) -> Result<(EnvState, f64), EnvError> {
        if state.terminal {
            return Err(EnvError::EpisodeOver);
        }
        let StatePayload::House(house) = &state.payload else {
            return Err(EnvError::EpisodeOver);
        };
        let mut next = house.clone();
        let mut terminal = false;
        let mut reward = 0.0;
        let observation = match parse_action(action) {
            Some(("goto", room)) => {
                let room = room.trim().to_lowercase();
                if self.has_room(&room) {
                    next.agent_room = room.clone();
                    let here = if next.object_room.as_deref() == Some(room.as_str()) {
                        format!(" You see a {} here.", next.object)
                    } else {
                        String::new()
                    };
                    format!("You move to the {room}.{here}")
                } else {
                    format!("There is no room called {room}.")
                }
            }
            Some(("take", arg)) => {
                if !next.holding
                    && arg == next.object
                    && next.object_room.as_deref() == Some(next.agent_room.as_str())
                {
                    next.holding = true;
                    next.object_room = None;
                    format!("You pick up the {}.", next.object)
                } else {
                    "Nothing happens.".to_string()
                }
            }
            Some(("put", arg)) => {
                if next.holding && arg == next.object {
                    next.holding = false;
                    next.object_room = Some(next.agent_room.clone());
                    let satisfied = Self::goal_satisfied(&next);
                    reward = binary_reward(satisfied);
                    if satisfied {
                        terminal = true;
                        format!("You put the {} down in the {}. Task complete.", next.object, next.agent_room)
                    } else {
                        format!("You put the {} down in the {}.", next.object, next.agent_room)
                    }
                } else {
                    "Nothing happens.".to_string()
                }
            }
            Some((verb @ ("clean" | "heat" | "cool"), arg)) => {
                if next.holding && arg == next.object {
                    match verb {
                        "clean" => next.cleaned = true,
                        "heat" => next.heated = true,
                        _ => next.cooled = true,
                    }
                    format!("You {verb} the {}.", next.object)
                } else {
                    "Nothing happens.".to_string()
                }
            }
            Some(("open" | "close", _)) => "Nothing happens.".to_string(),
            _ => format!("Invalid action: {action}."),
        };
        Ok((
            EnvState {
                observation_text: observation,
                terminal,
                payload: StatePayload::House(next),
            },
            reward,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world() -> SynthHouseEnv {
        SynthHouseEnv::new(23)
    }

    fn task(env: &SynthHouseEnv, transform: Transform) -> TaskSpec {
        let object = "mug".to_string();
        let source = env.rooms()[3].clone();
        let target = env.rooms()[7].clone();
        let verb = match transform {
            Transform::None => None,
            Transform::Clean => Some("clean"),
            Transform::Heat => Some("heat"),
            Transform::Cool => Some("cool"),
        };
        let goal_text = match verb {
            None => format!("Take the {object} from the {source} and put it in the {target}."),
            Some(v) => {
                format!("Take the {object} from the {source}, {v} it, and put it in the {target}.")
            }
        };
        TaskSpec {
            env_id: "synthhouse".into(),
            task_id: "h000".into(),
            goal_text,
            failure_mode: crate::actor::FailureMode::None,
            truth: TaskTruth::House {
                object,
                source_room: source,
                target_room: target,
                transform,
                distractor_room: env.absent_rooms()[0].clone(),
            },
        }
    }

    #[test]
    fn test_world_partitions_room_pool() {
        let env = world();
        assert_eq!(env.rooms().len(), 25);
        assert_eq!(env.absent_rooms().len(), 8);
        for absent in env.absent_rooms() {
            assert!(!env.has_room(absent));
        }
    }

    #[test]
    fn test_gold_sequence_pays_binary_reward_and_terminates() {
        let env = world();
        let t = task(&env, Transform::None);
        let TaskTruth::House { source_room, target_room, .. } = &t.truth else { unreachable!() };
        let s0 = env.reset(&t, 0).unwrap();
        let (s1, r1) = env.step(&s0, &format!("goto[{source_room}]")).unwrap();
        assert!(s1.observation_text.contains("You see a mug here."));
        let (s2, r2) = env.step(&s1, "take[mug]").unwrap();
        assert_eq!(s2.observation_text, "You pick up the mug.");
        let (s3, r3) = env.step(&s2, &format!("goto[{target_room}]")).unwrap();
        let (s4, r4) = env.step(&s3, "put[mug]").unwrap();
        assert_eq!([r1, r2, r3], [0.0; 3]);
        assert_eq!(r4, 1.0);
        assert!(s4.terminal);
        assert!(s4.observation_text.ends_with("Task complete."));
    }

    #[test]
    fn test_transform_required_before_put() {
        let env = world();
        let t = task(&env, Transform::Heat);
        let TaskTruth::House { source_room, target_room, .. } = &t.truth else { unreachable!() };
        let s0 = env.reset(&t, 0).unwrap();
        let (s1, _) = env.step(&s0, &format!("goto[{source_room}]")).unwrap();
        let (s2, _) = env.step(&s1, "take[mug]").unwrap();
        let (s3, _) = env.step(&s2, &format!("goto[{target_room}]")).unwrap();
        // Put without heating: no reward, episode continues.
        let (s4, r4) = env.step(&s3, "put[mug]").unwrap();
        assert_eq!(r4, 0.0);
        assert!(!s4.terminal);
        // Recover: take it back, heat, put again.
        let (s5, _) = env.step(&s4, "take[mug]").unwrap();
        let (s6, _) = env.step(&s5, "heat[mug]").unwrap();
        assert_eq!(s6.observation_text, "You heat the mug.");
        let (s7, r7) = env.step(&s6, "put[mug]").unwrap();
        assert_eq!(r7, 1.0);
        assert!(s7.terminal);
    }

    #[test]
    fn test_missing_room_and_idle_markers() {
        let env = world();
        let t = task(&env, Transform::None);
        let TaskTruth::House { distractor_room, .. } = &t.truth else { unreachable!() };
        let s0 = env.reset(&t, 0).unwrap();
        let (s1, _) = env.step(&s0, &format!("goto[{distractor_room}]")).unwrap();
        assert_eq!(s1.observation_text, format!("There is no room called {distractor_room}."));
        let (s2, _) = env.step(&s1, "take[mug]").unwrap();
        assert_eq!(s2.observation_text, "Nothing happens.");
        let (s3, _) = env.step(&s2, "open[the cabinet]").unwrap();
        assert_eq!(s3.observation_text, "Nothing happens.");
        let (s4, _) = env.step(&s3, "sing[loudly]").unwrap();
        assert_eq!(s4.observation_text, "Invalid action: sing[loudly].");
    }

    #[test]
    fn test_put_in_wrong_room_is_recoverable() {
        let env = world();
        let t = task(&env, Transform::None);
        let TaskTruth::House { source_room, target_room, .. } = &t.truth else { unreachable!() };
        let s0 = env.reset(&t, 0).unwrap();
        let (s1, _) = env.step(&s0, &format!("goto[{source_room}]")).unwrap();
        let (s2, _) = env.step(&s1, "take[mug]").unwrap();
        // Drop it where it was taken.
        let (s3, r3) = env.step(&s2, "put[mug]").unwrap();
        assert_eq!(r3, 0.0);
        assert!(!s3.terminal);
        // Pick it back up and finish properly.
        let (s4, _) = env.step(&s3, "take[mug]").unwrap();
        let (s5, _) = env.step(&s4, &format!("goto[{target_room}]")).unwrap();
        let (s6, r6) = env.step(&s5, "put[mug]").unwrap();
        assert_eq!(r6, 1.0);
        assert!(s6.terminal);
    }

    #[test]
    fn test_reset_rejects_bad_tasks() {
        let env = world();
        let mut t = task(&env, Transform::None);
        if let TaskTruth::House { source_room, .. } = &mut t.truth {
            *source_room = env.absent_rooms()[1].clone();
        }
        assert!(matches!(env.reset(&t, 0), Err(EnvError::TaskNotFound { .. })));

        let mut t2 = task(&env, Transform::None);
        if let TaskTruth::House { target_room, source_room, .. } = &mut t2.truth {
            *target_room = source_room.clone();
        }
        assert!(matches!(env.reset(&t2, 0), Err(EnvError::TaskNotFound { .. })));
    }
}
