//! Two-hop lookup environment over a small synthetic entity graph.
//!
//! The world holds 12 works, each starring two actors and carrying four
//! facts (director, composer, producer, release year). A question names a
//! star; the gold path is `Search[star]` to learn the work, `Search[work]`
//! to open its page, `Lookup[keyword]` to surface the fact sentence, and
//! `Finish[answer]`, scored by token F1 against the gold answer.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{parse_action, EnvError, EnvState, Environment, StatePayload, TaskSpec, TaskTruth};
use crate::rewards::f1_reward;

const GIVEN_NAMES: [&str; 30] = [
    "Mara", "Tomas", "Ingrid", "Felix", "Anya", "Ruben", "Clara", "Dmitri", "Selma", "Arjun",
    "Noor", "Henrik", "Paloma", "Kenji", "Beatrix", "Omar", "Livia", "Casper", "Yuki", "Abel",
    "Sonia", "Viktor", "Elena", "Marcus", "Priya", "Lars", "Odette", "Rafael", "Hana", "Gustav",
];

const FAMILY_NAMES: [&str; 30] = [
    "Quinn", "Reyes", "Lindqvist", "Okafor", "Marchetti", "Sato", "Halvorsen", "Dubois", "Iyer",
    "Petrov", "Almeida", "Novak", "Eriksen", "Tanaka", "Moreau", "Castellanos", "Bergstrom",
    "Ferreira", "Kowalski", "Nakamura", "Vasquez", "Lindgren", "Oyelaran", "Fontaine", "Rahimi",
    "Svensson", "Delacroix", "Ibarra", "Magnusson", "Volkov",
];

const TITLE_FIRST: [&str; 16] = [
    "Silver", "Hollow", "Crimson", "Winter", "Amber", "Quiet", "Iron", "Golden", "Distant",
    "Violet", "Broken", "Northern", "Paper", "Midnight", "Emerald", "Wandering",
];

const TITLE_SECOND: [&str; 16] = [
    "Harbor", "Orchard", "Lantern", "Meridian", "Causeway", "Summit", "Arcade", "Estuary",
    "Signal", "Garden", "Compass", "Terrace", "Vigil", "Crossing", "Atlas", "Parallel",
];

/// The four fact relations a question can ask about, keyed by the lookup
/// keyword that surfaces them.
pub const QA_RELATIONS: [&str; 4] = ["directed", "composed", "produced", "released"];

#[derive(Debug, Clone)]
struct Work {
    title: String,
    director: String,
    composer: String,
    producer: String,
    year: u32,
    stars: [String; 2],
}

/// One fully specified question the world can ask.
#[derive(Debug, Clone)]
pub struct QaCandidate {
    pub question_text: String,
    pub entry_entity: String,
    pub work_entity: String,
    pub lookup_keyword: String,
    pub answer: String,
    pub distractor_query: String,
}

/// Hidden per-episode state: the gold answer and the page Lookup reads.
#[derive(Debug, Clone, PartialEq)]
pub struct QaState {
    gold_answer: String,
    page: Option<Vec<String>>,
}

pub struct SynthQaEnv {
    works: Vec<Work>,
    stars: Vec<String>,
    crew: Vec<String>,
}

impl SynthQaEnv {
    pub fn new(world_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(world_seed);
        let mut given: Vec<&str> = GIVEN_NAMES.to_vec();
        let mut family: Vec<&str> = FAMILY_NAMES.to_vec();
        given.shuffle(&mut rng);
        family.shuffle(&mut rng);
        let people: Vec<String> = given
            .iter()
            .zip(family.iter())
            .map(|(g, f)| format!("{g} {f}"))
            .collect();
        let stars: Vec<String> = people[..24].to_vec();
        let crew: Vec<String> = people[24..30].to_vec();

        let mut firsts: Vec<&str> = TITLE_FIRST.to_vec();
        let mut seconds: Vec<&str> = TITLE_SECOND.to_vec();
        firsts.shuffle(&mut rng);
        seconds.shuffle(&mut rng);

        let works = (0..12)
            .map(|i| {
                let picks = rand::seq::index::sample(&mut rng, crew.len(), 3);
                Work {
                    title: format!("{} {}", firsts[i], seconds[i]),
                    director: crew[picks.index(0)].clone(),
                    composer: crew[picks.index(1)].clone(),
                    producer: crew[picks.index(2)].clone(),
                    year: 1950 + rng.random_range(0..70),
                    stars: [stars[2 * i].clone(), stars[2 * i + 1].clone()],
                }
            })
            .collect();
        Self { works, stars, crew }
    }

    /// Enumerates all star-by-relation questions this world supports.
    pub fn candidates(&self) -> Vec<QaCandidate> {
        let mut out = Vec::new();
        for (wi, work) in self.works.iter().enumerate() {
            for (si, star) in work.stars.iter().enumerate() {
                for keyword in QA_RELATIONS {
                    let (question, answer) = self.question_for(work, star, keyword);
                    // A near-miss name: the star's given name joined with a
                    // family name from a different pairing, never a real
                    // entity because full-name pairings are unique.
                    let given = star.split(' ').next().unwrap_or(star);
                    let other = &self.stars[(2 * wi + si + 1) % self.stars.len()];
                    let other_family = other.rsplit(' ').next().unwrap_or(other);
                    let distractor_query = format!("{given} {other_family}");
                    debug_assert!(self.find_entity(&distractor_query).is_none());
                    out.push(QaCandidate {
                        question_text: question,
                        entry_entity: star.clone(),
                        work_entity: work.title.clone(),
                        lookup_keyword: keyword.to_string(),
                        answer,
                        distractor_query,
                    });
                }
            }
        }
        out
    }

    fn question_for(&self, work: &Work, star: &str, keyword: &str) -> (String, String) {
        match keyword {
            "directed" => (
                format!("Who directed the film that {star} starred in?"),
                work.director.clone(),
            ),
            "composed" => (
                format!("Who composed the music for the film that {star} starred in?"),
                work.composer.clone(),
            ),
            "produced" => (
                format!("Who produced the film that {star} starred in?"),
                work.producer.clone(),
            ),
            "released" => (
                format!("In which year was the film that {star} starred in released?"),
                work.year.to_string(),
            ),
            other => unreachable!("unknown relation keyword {other}"),
        }
    }

    fn find_entity(&self, name: &str) -> Option<Entity<'_>> {
        let needle = name.trim().to_lowercase();
        if let Some(work) = self.works.iter().find(|w| w.title.to_lowercase() == needle) {
            return Some(Entity::Work(work));
        }
        if let Some((work, star)) = self.works.iter().find_map(|w| {
            w.stars
                .iter()
                .find(|s| s.to_lowercase() == needle)
                .map(|s| (w, s.as_str()))
        }) {
            return Some(Entity::Star { work, name: star });
        }
        if let Some(person) = self.crew.iter().find(|c| c.to_lowercase() == needle) {
            return Some(Entity::Crew(person));
        }
        None
    }

    fn work_page(work: &Work) -> Vec<String> {
        vec![
            format!("{} was directed by {}.", work.title, work.director),
            format!("The music of {} was composed by {}.", work.title, work.composer),
            format!("{} was produced by {}.", work.title, work.producer),
            format!("{} was released in {}.", work.title, work.year),
        ]
    }
}

enum Entity<'a> {
    Work(&'a Work),
    Star { work: &'a Work, name: &'a str },
    Crew(&'a String),
}

impl Environment for SynthQaEnv {
    fn env_id(&self) -> &'static str {
        "synthqa"
    }

    fn default_max_steps(&self) -> u32 {
        8
    }

    fn reset(&self, task: &TaskSpec, _seed: u64) -> Result<EnvState, EnvError> {
        let mismatch = |detail: String| EnvError::TaskNotFound {
            task_id: task.task_id.clone(),
            detail,
        };
        let TaskTruth::Qa { entry_entity, work_entity, lookup_keyword, answer, distractor_query } =
            &task.truth
        else {
            return Err(mismatch("truth is not a qa record".into()));
        };
        let Some(Entity::Star { work, .. }) = self.find_entity(entry_entity) else {
            return Err(mismatch(format!("{entry_entity:?} is not a star in this world")));
        };
        if &work.title != work_entity {
            return Err(mismatch(format!(
                "{entry_entity:?} stars in {:?}, not {work_entity:?}",
                work.title
            )));
        }
        let expected = match lookup_keyword.as_str() {
            "directed" => work.director.clone(),
            "composed" => work.composer.clone(),
            "produced" => work.producer.clone(),
            "released" => work.year.to_string(),
            other => return Err(mismatch(format!("unknown lookup keyword {other:?}"))),
        };
        if &expected != answer {
            return Err(mismatch(format!("answer {answer:?} does not match world fact")));
        }
        if self.find_entity(distractor_query).is_some() {
            return Err(mismatch(format!("distractor {distractor_query:?} exists in world")));
        }
        Ok(EnvState {
            observation_text: format!("Question: {}", task.goal_text),
            terminal: false,
            payload: StatePayload::Qa(QaState { gold_answer: answer.clone(), page: None }),
        })
    }

    fn step(&self, state: &EnvState, action: &str) -> Result<(EnvState, f64), EnvError> {
        if state.terminal {
            return Err(EnvError::EpisodeOver);
        }
        let StatePayload::Qa(qa) = &state.payload else {
            return Err(EnvError::EpisodeOver);
        };
        let mut next = qa.clone();
        let mut terminal = false;
        let mut reward = 0.0;
        let observation = match parse_action(action) {
            Some(("Search", query)) => match self.find_entity(query) {
                Some(Entity::Star { work, name }) => {
                    next.page = Some(vec![format!(
                        "{name} starred in the film {}.",
                        work.title
                    )]);
                    format!("{name} is an actor. {name} starred in the film {}.", work.title)
                }
                Some(Entity::Work(work)) => {
                    next.page = Some(Self::work_page(work));
                    format!("{} is a film. Use Lookup to find details.", work.title)
                }
                Some(Entity::Crew(person)) => {
                    next.page = Some(vec![format!("{person} is a filmmaker.")]);
                    format!("{person} is a filmmaker.")
                }
                None => format!("Could not find {}.", query.trim()),
            },
            Some(("Lookup", keyword)) => match &qa.page {
                None => format!("Could not find keyword {keyword}. No page is open."),
                Some(sentences) => {
                    let needle = keyword.trim().to_lowercase();
                    sentences
                        .iter()
                        .find(|s| s.to_lowercase().contains(&needle))
                        .cloned()
                        .unwrap_or_else(|| {
                            format!("Could not find keyword {keyword} in the current page.")
                        })
                }
            },
            Some(("Finish", answer)) => {
                terminal = true;
                reward = f1_reward(answer, &qa.gold_answer);
                "Episode finished.".to_string()
            }
            _ => format!(
                "Invalid action: {action}. Valid actions: Search[query], Lookup[keyword], Finish[answer]."
            ),
        };
        Ok((
            EnvState {
                observation_text: observation,
                terminal,
                payload: StatePayload::Qa(next),
            },
            reward,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world() -> SynthQaEnv {
        SynthQaEnv::new(41)
    }

    fn task_from(candidate: &QaCandidate) -> TaskSpec {
        TaskSpec {
            env_id: "synthqa".into(),
            task_id: "q000".into(),
            goal_text: candidate.question_text.clone(),
            failure_mode: crate::actor::FailureMode::None,
            truth: TaskTruth::Qa {
                entry_entity: candidate.entry_entity.clone(),
                work_entity: candidate.work_entity.clone(),
                lookup_keyword: candidate.lookup_keyword.clone(),
                answer: candidate.answer.clone(),
                distractor_query: candidate.distractor_query.clone(),
            },
        }
    }

    #[test]
    fn test_world_shape() {
        let env = world();
        assert_eq!(env.works.len(), 12);
        assert_eq!(env.stars.len(), 24);
        assert_eq!(env.crew.len(), 6);
        let candidates = env.candidates();
        assert_eq!(candidates.len(), 96);
        // All distractors resolve to nothing.
        for c in &candidates {
            assert!(env.find_entity(&c.distractor_query).is_none(), "{}", c.distractor_query);
        }
    }

    #[test]
    fn test_world_is_deterministic_per_seed() {
        let a = SynthQaEnv::new(9);
        let b = SynthQaEnv::new(9);
        let c = SynthQaEnv::new(10);
        let qa: Vec<String> = a.candidates().iter().map(|x| x.question_text.clone()).collect();
        let qb: Vec<String> = b.candidates().iter().map(|x| x.question_text.clone()).collect();
        let qc: Vec<String> = c.candidates().iter().map(|x| x.question_text.clone()).collect();
        assert_eq!(qa, qb);
        assert_ne!(qa, qc);
    }

    #[test]
    fn test_gold_path_scores_full_f1() {
        let env = world();
        let candidate = &env.candidates()[0];
        let task = task_from(candidate);
        let state = env.reset(&task, 0).unwrap();
        assert!(state.observation_text.starts_with("Question: "));

        let (s1, r1) = env
            .step(&state, &format!("Search[{}]", candidate.entry_entity))
            .unwrap();
        assert_eq!(r1, 0.0);
        assert!(s1.observation_text.contains(&candidate.work_entity));

        let (s2, _) = env.step(&s1, &format!("Search[{}]", candidate.work_entity)).unwrap();
        assert!(s2.observation_text.contains("Use Lookup"));

        let (s3, _) = env.step(&s2, &format!("Lookup[{}]", candidate.lookup_keyword)).unwrap();
        assert!(
            s3.observation_text.contains(&candidate.answer),
            "{} missing from {}",
            candidate.answer,
            s3.observation_text
        );

        let (s4, r4) = env.step(&s3, &format!("Finish[{}]", candidate.answer)).unwrap();
        assert!(s4.terminal);
        assert!((r4 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn test_search_miss_and_lookup_miss_markers() {
        let env = world();
        let candidate = &env.candidates()[5];
        let task = task_from(candidate);
        let state = env.reset(&task, 0).unwrap();

        let (s1, _) = env.step(&state, "Search[Zorbulon Prime]").unwrap();
        assert_eq!(s1.observation_text, "Could not find Zorbulon Prime.");

        let (s2, _) = env.step(&s1, "Lookup[directed]").unwrap();
        assert!(s2.observation_text.starts_with("Could not find keyword directed"));

        let (s3, _) = env
            .step(&s2, &format!("Search[{}]", candidate.work_entity))
            .unwrap();
        let (s4, _) = env.step(&s3, "Lookup[starfleet]").unwrap();
        assert_eq!(
            s4.observation_text,
            "Could not find keyword starfleet in the current page."
        );
    }

    #[test]
    fn test_invalid_action_text() {
        let env = world();
        let candidate = &env.candidates()[0];
        let task = task_from(candidate);
        let state = env.reset(&task, 0).unwrap();
        let (s1, r) = env.step(&state, "dance wildly").unwrap();
        assert!(s1.observation_text.starts_with("Invalid action: dance wildly."));
        assert_eq!(r, 0.0);
        assert!(!s1.terminal);
    }

    #[test]
    fn test_reset_rejects_world_mismatches() {
        let env = world();
        let candidate = &env.candidates()[0];
        let mut task = task_from(candidate);
        if let TaskTruth::Qa { answer, .. } = &mut task.truth {
            *answer = "Someone Else".into();
        }
        assert!(matches!(env.reset(&task, 0), Err(EnvError::TaskNotFound { .. })));

        let mut task2 = task_from(candidate);
        if let TaskTruth::Qa { entry_entity, .. } = &mut task2.truth {
            *entry_entity = "Nobody Atall".into();
        }
        assert!(matches!(env.reset(&task2, 0), Err(EnvError::TaskNotFound { .. })));
    }

    #[test]
    fn test_year_questions_score_exactly() {
        let env = world();
        let candidate = env
            .candidates()
            .into_iter()
            .find(|c| c.lookup_keyword == "released")
            .unwrap();
        let task = task_from(&candidate);
        let state = env.reset(&task, 0).unwrap();
        let (_, r) = env.step(&state, &format!("Finish[{}]", candidate.answer)).unwrap();
        assert!((r - 1.0).abs() < 1e-12);
        // A wrong year scores zero, not partial credit.
        let state = env.reset(&task, 0).unwrap();
        let (_, r0) = env.step(&state, "Finish[1900]").unwrap();
        assert_eq!(r0, 0.0);
    }
}
