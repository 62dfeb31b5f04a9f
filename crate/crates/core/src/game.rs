//! Guessing-game sessions for human raters.
//!
//! A session walks through the anonymized scenes of the chosen movies in
//! order. For each scene the rater assigns every masked label to one of the
//! candidate names and says whether earlier scenes were needed; the answers
//! are revealed only after that submission. Sessions are stored as
//! append-only JSON Lines event logs and rebuilt by replaying them.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::benchmark::{AnonymizedScene, Task};
use crate::evaluation::instance_accuracy;
use crate::learners::Prediction;
use crate::screenplay::Utterance;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum GameError {
    #[error("unknown session {0:?}")]
    UnknownSession(String),
    #[error("scene {0} was already answered")]
    AlreadyAnswered(usize),
    #[error("{0}")]
    BadRequest(String),
    #[error("session storage failed: {0}")]
    Storage(String),
}

impl From<std::io::Error> for GameError {
    fn from(e: std::io::Error) -> Self {
        GameError::Storage(e.to_string())
    }
}

impl From<serde_json::Error> for GameError {
    fn from(e: serde_json::Error) -> Self {
        GameError::Storage(e.to_string())
    }
}

pub type GameResult<T> = std::result::Result<T, GameError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Created {
        session_id: String,
        rater_id: String,
        movie_ids: Vec<String>,
        at_ms: u64,
    },
    Guess {
        movie_id: String,
        scene_index: usize,
        assignments: BTreeMap<String, String>,
        needs_history: bool,
        at_ms: u64,
    },
}

/// A scene as shown to the rater: no answers included.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneView {
    pub done: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scene: Option<PresentedScene>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PresentedScene {
    /// 0-based position in the session queue.
    pub position: usize,
    pub total: usize,
    pub movie_id: String,
    pub scene_index: usize,
    pub heading: String,
    pub utterances: Vec<Utterance>,
    /// Masked labels to assign, `P0..P4` order.
    pub slots: Vec<String>,
    /// Candidate names, alphabetical.
    pub candidates: Vec<String>,
    /// Present once the scene has been answered.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub revealed: Option<GuessOutcome>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotOutcome {
    pub guess: String,
    pub answer: String,
    pub correct: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuessOutcome {
    pub movie_id: String,
    pub scene_index: usize,
    pub results: BTreeMap<String, SlotOutcome>,
    pub needs_history: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuessRequest {
    /// Needed only when the session spans several movies and the index
    /// alone is ambiguous.
    #[serde(default)]
    pub movie_id: Option<String>,
    pub scene_index: usize,
    pub assignments: BTreeMap<String, String>,
    #[serde(default)]
    pub needs_history: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneScore {
    pub movie_id: String,
    pub scene_index: usize,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
    pub needs_history: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub session_id: String,
    pub rater_id: String,
    pub answered_scenes: usize,
    pub total_scenes: usize,
    pub instances: usize,
    pub correct: usize,
    /// `None` until at least one scene is answered.
    pub accuracy: Option<f64>,
    pub needs_history_fraction: Option<f64>,
    pub scenes: Vec<SceneScore>,
}

#[derive(Clone, Debug, PartialEq)]
struct Answered {
    at_ms: u64,
    outcome: GuessOutcome,
}

#[derive(Clone, Debug)]
pub struct Session {
    pub id: String,
    pub rater_id: String,
    pub movie_ids: Vec<String>,
    pub created_at_ms: u64,
    queue: Vec<(String, usize)>,
    answers: Vec<Option<Answered>>,
}

/// Read-only access to the served tasks.
#[derive(Clone, Debug, Default)]
pub struct Catalog {
    tasks: BTreeMap<String, Task>,
}

impl Catalog {
    pub fn new(tasks: impl IntoIterator<Item = Task>) -> Self {
        Catalog {
            tasks: tasks.into_iter().map(|t| (t.movie_id.clone(), t)).collect(),
        }
    }

    pub fn movie_ids(&self) -> impl Iterator<Item = &str> {
        self.tasks.keys().map(String::as_str)
    }

    pub fn task(&self, id: &str) -> Option<&Task> {
        self.tasks.get(id)
    }

    fn scene(&self, movie_id: &str, index: usize) -> Option<&AnonymizedScene> {
        self.tasks.get(movie_id).and_then(|t| t.scene(index))
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}

impl Session {
    /// A session over `movie_ids` (every served movie when empty): all
    /// scenes with at least one masked speaker, in movie order.
    pub fn new(id: String, rater_id: String, movie_ids: Vec<String>, catalog: &Catalog, at_ms: u64) -> GameResult<Self> {
        if rater_id.trim().is_empty() {
            return Err(GameError::BadRequest("rater_id must not be empty".into()));
        }
        let movie_ids = if movie_ids.is_empty() {
            catalog.movie_ids().map(str::to_string).collect()
        } else {
            movie_ids
        };
        let mut queue = Vec::new();
        let mut seen = BTreeSet::new();
        for m in &movie_ids {
            if !seen.insert(m) {
                return Err(GameError::BadRequest(format!("movie {m:?} listed twice")));
            }
            let task = catalog
                .task(m)
                .ok_or_else(|| GameError::BadRequest(format!("movie {m:?} is not served")))?;
            queue.extend(
                task.scenes
                    .iter()
                    .filter(|s| !s.id_map.is_empty())
                    .map(|s| (m.clone(), s.scene_index)),
            );
        }
        if queue.is_empty() {
            return Err(GameError::BadRequest("the selected movies have no playable scenes".into()));
        }
        let answers = vec![None; queue.len()];
        Ok(Session {
            id,
            rater_id,
            movie_ids,
            created_at_ms: at_ms,
            queue,
            answers,
        })
    }

    /// Position of the first unanswered scene, or `None` when finished.
    pub fn cursor(&self) -> Option<usize> {
        self.answers.iter().position(Option::is_none)
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    fn present(&self, position: usize, catalog: &Catalog) -> GameResult<PresentedScene> {
        let (movie_id, index) = &self.queue[position];
        let scene = catalog
            .scene(movie_id, *index)
            .ok_or_else(|| GameError::Storage(format!("scene {movie_id}/{index} vanished")))?;
        let mut candidates = scene.candidates.clone();
        candidates.sort();
        Ok(PresentedScene {
            position,
            total: self.queue.len(),
            movie_id: movie_id.clone(),
            scene_index: *index,
            heading: scene.heading.clone(),
            utterances: scene.utterances.clone(),
            slots: scene.id_map.keys().cloned().collect(),
            candidates,
            revealed: self.answers[position].as_ref().map(|a| a.outcome.clone()),
        })
    }

    pub fn next(&self, catalog: &Catalog) -> GameResult<SceneView> {
        match self.cursor() {
            None => Ok(SceneView { done: true, scene: None }),
            Some(p) => Ok(SceneView {
                done: false,
                scene: Some(self.present(p, catalog)?),
            }),
        }
    }

    /// Re-reads a scene that has already been presented.
    pub fn revisit(&self, position: usize, catalog: &Catalog) -> GameResult<PresentedScene> {
        let limit = self.cursor().unwrap_or(self.queue.len());
        if position > limit || position >= self.queue.len() {
            return Err(GameError::BadRequest(format!("scene position {position} has not been presented yet")));
        }
        self.present(position, catalog)
    }

    fn locate(&self, movie_id: Option<&str>, scene_index: usize) -> GameResult<usize> {
        let hits: Vec<usize> = self
            .queue
            .iter()
            .enumerate()
            .filter(|(_, (m, s))| *s == scene_index && movie_id.is_none_or(|id| id == m))
            .map(|(i, _)| i)
            .collect();
        match hits.as_slice() {
            [p] => Ok(*p),
            [] => Err(GameError::BadRequest(format!("scene {scene_index} is not part of this session"))),
            _ => Err(GameError::BadRequest(format!(
                "scene index {scene_index} is ambiguous; include movie_id"
            ))),
        }
    }

    /// Validates and scores a guess without recording it.
    pub fn check_guess(&self, req: &GuessRequest, catalog: &Catalog) -> GameResult<GuessOutcome> {
        let position = self.locate(req.movie_id.as_deref(), req.scene_index)?;
        if self.answers[position].is_some() {
            return Err(GameError::AlreadyAnswered(req.scene_index));
        }
        if Some(position) != self.cursor() {
            return Err(GameError::BadRequest(format!(
                "scene {} has not been presented yet",
                req.scene_index
            )));
        }
        let (movie_id, index) = &self.queue[position];
        let scene = catalog
            .scene(movie_id, *index)
            .ok_or_else(|| GameError::Storage(format!("scene {movie_id}/{index} vanished")))?;
        let slots: BTreeSet<&String> = scene.id_map.keys().collect();
        let given: BTreeSet<&String> = req.assignments.keys().collect();
        if slots != given {
            return Err(GameError::BadRequest(format!(
                "assignments must cover exactly the slots {:?}",
                slots
            )));
        }
        let mut used = BTreeSet::new();
        for name in req.assignments.values() {
            if !scene.candidates.contains(name) {
                return Err(GameError::BadRequest(format!("{name:?} is not a candidate")));
            }
            if !used.insert(name) {
                return Err(GameError::BadRequest(format!("{name:?} is assigned to more than one slot")));
            }
        }
        let results = req
            .assignments
            .iter()
            .map(|(label, guess)| {
                let answer = scene.id_map[label].clone();
                (
                    label.clone(),
                    SlotOutcome {
                        correct: *guess == answer,
                        guess: guess.clone(),
                        answer,
                    },
                )
            })
            .collect();
        Ok(GuessOutcome {
            movie_id: movie_id.clone(),
            scene_index: *index,
            results,
            needs_history: req.needs_history,
        })
    }

    fn record(&mut self, outcome: GuessOutcome, at_ms: u64) -> GameResult<()> {
        let position = self.locate(Some(&outcome.movie_id), outcome.scene_index)?;
        self.answers[position] = Some(Answered { at_ms, outcome });
        Ok(())
    }

    /// The session's answers as predictions, for scoring with the shared
    /// evaluation code.
    pub fn predictions(&self) -> Vec<Prediction> {
        self.answers
            .iter()
            .flatten()
            .flat_map(|a| {
                a.outcome.results.iter().map(move |(label, r)| Prediction {
                    movie_id: a.outcome.movie_id.clone(),
                    scene_index: a.outcome.scene_index,
                    masked_id: label.clone(),
                    gold: r.answer.clone(),
                    predicted: r.guess.clone(),
                    logits: Vec::new(),
                })
            })
            .collect()
    }

    pub fn report(&self) -> SessionReport {
        let preds = self.predictions();
        let answered: Vec<&Answered> = self.answers.iter().flatten().collect();
        let scenes: Vec<SceneScore> = answered
            .iter()
            .map(|a| {
                let correct = a.outcome.results.values().filter(|r| r.correct).count();
                let total = a.outcome.results.len();
                SceneScore {
                    movie_id: a.outcome.movie_id.clone(),
                    scene_index: a.outcome.scene_index,
                    correct,
                    total,
                    accuracy: correct as f64 / total.max(1) as f64,
                    needs_history: a.outcome.needs_history,
                }
            })
            .collect();
        let flagged = answered.iter().filter(|a| a.outcome.needs_history).count();
        SessionReport {
            session_id: self.id.clone(),
            rater_id: self.rater_id.clone(),
            answered_scenes: answered.len(),
            total_scenes: self.queue.len(),
            instances: preds.len(),
            correct: preds.iter().filter(|p| p.is_correct()).count(),
            accuracy: instance_accuracy(&preds).ok(),
            needs_history_fraction: (!answered.is_empty()).then(|| flagged as f64 / answered.len() as f64),
            scenes,
        }
    }

    /// Timestamps of answered scenes, queue order.
    pub fn answer_times(&self) -> Vec<u64> {
        self.answers.iter().flatten().map(|a| a.at_ms).collect()
    }
}

pub fn now_ms() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

fn new_session_id() -> String {
    let bytes: [u8; 12] = rand::rng().random();
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn valid_session_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

/// All sessions, optionally persisted under a directory as one
/// `<session_id>.jsonl` event log each.
#[derive(Debug)]
pub struct SessionStore {
    catalog: Catalog,
    sessions: HashMap<String, Session>,
    dir: Option<PathBuf>,
}

impl SessionStore {
    pub fn in_memory(catalog: Catalog) -> Self {
        SessionStore {
            catalog,
            sessions: HashMap::new(),
            dir: None,
        }
    }

    /// Opens `dir`, replaying every event log found there.
    pub fn open(catalog: Catalog, dir: &Path) -> GameResult<Self> {
        std::fs::create_dir_all(dir)?;
        let mut store = SessionStore {
            catalog,
            sessions: HashMap::new(),
            dir: Some(dir.to_path_buf()),
        };
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        paths.sort();
        for path in paths {
            match store.replay(&path) {
                Ok(s) => {
                    store.sessions.insert(s.id.clone(), s);
                }
                Err(e) => log::warn!("ignoring session log {}: {e}", path.display()),
            }
        }
        Ok(store)
    }

    fn replay(&self, path: &Path) -> GameResult<Session> {
        let reader = BufReader::new(File::open(path)?);
        let mut session: Option<Session> = None;
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<Event>(&line) {
                Ok(event) => apply(&mut session, event, &self.catalog)?,
                // A torn final write from a crash; everything before it stands.
                Err(e) => {
                    log::warn!("stopping replay of {} at a malformed line: {e}", path.display());
                    break;
                }
            }
        }
        session.ok_or_else(|| GameError::Storage("empty session log".into()))
    }

    fn append(&self, session_id: &str, event: &Event) -> GameResult<()> {
        if let Some(dir) = &self.dir {
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(dir.join(format!("{session_id}.jsonl")))?;
            let mut line = serde_json::to_string(event)?;
            line.push('\n');
            f.write_all(line.as_bytes())?;
            f.sync_data()?;
        }
        Ok(())
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    pub fn create(&mut self, rater_id: String, movie_ids: Vec<String>) -> GameResult<String> {
        let id = new_session_id();
        let at_ms = now_ms();
        let session = Session::new(id.clone(), rater_id.clone(), movie_ids, &self.catalog, at_ms)?;
        let event = Event::Created {
            session_id: id.clone(),
            rater_id,
            movie_ids: session.movie_ids.clone(),
            at_ms,
        };
        self.append(&id, &event)?;
        self.sessions.insert(id.clone(), session);
        Ok(id)
    }

    pub fn get(&self, id: &str) -> GameResult<&Session> {
        self.sessions
            .get(id)
            .ok_or_else(|| GameError::UnknownSession(id.to_string()))
    }

    pub fn guess(&mut self, id: &str, req: GuessRequest) -> GameResult<GuessOutcome> {
        let session = self.get(id)?;
        let outcome = session.check_guess(&req, &self.catalog)?;
        let at_ms = now_ms();
        let event = Event::Guess {
            movie_id: outcome.movie_id.clone(),
            scene_index: outcome.scene_index,
            assignments: req.assignments,
            needs_history: req.needs_history,
            at_ms,
        };
        self.append(id, &event)?;
        self.sessions
            .get_mut(id)
            .expect("checked above")
            .record(outcome.clone(), at_ms)?;
        Ok(outcome)
    }
}

fn apply(session: &mut Option<Session>, event: Event, catalog: &Catalog) -> GameResult<()> {
    match (session.as_mut(), event) {
        (
            None,
            Event::Created {
                session_id,
                rater_id,
                movie_ids,
                at_ms,
            },
        ) => {
            if !valid_session_id(&session_id) {
                return Err(GameError::Storage(format!("bad session id {session_id:?}")));
            }
            *session = Some(Session::new(session_id, rater_id, movie_ids, catalog, at_ms)?);
            Ok(())
        }
        (
            Some(s),
            Event::Guess {
                movie_id,
                scene_index,
                assignments,
                needs_history,
                at_ms,
            },
        ) => {
            let req = GuessRequest {
                movie_id: Some(movie_id),
                scene_index,
                assignments,
                needs_history,
            };
            let outcome = s.check_guess(&req, catalog)?;
            s.record(outcome, at_ms)
        }
        _ => Err(GameError::Storage("event out of order".into())),
    }
}
