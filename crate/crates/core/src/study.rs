//! User study over a finished run: structural identification (pick the
//! painting a real-scene image came from, out of five) followed by a 1-5
//! realism rating, repeated for each question set.
//!
//! A study directory holds `study.json` (the definition, including answer
//! keys), `responses.jsonl` (append-only log of session openings and
//! answers) and `aggregate.json` (derived, rewritten on every aggregation).

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use num_rational::Ratio;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline::{hash_parts, RunRecord, Stage};

pub const STUDY_FILE: &str = "study.json";
pub const RESPONSES_FILE: &str = "responses.jsonl";
pub const AGGREGATE_FILE: &str = "aggregate.json";

pub const CANDIDATES: usize = 5;
pub const DEFAULT_QUESTION_SETS: usize = 5;
pub const RATING_RANGE: std::ops::RangeInclusive<i64> = 1..=5;

#[derive(Debug, Error)]
pub enum StudyError {
    #[error("need at least {required} paintings with real-scene outputs, found {available}")]
    NotEnoughMaterial { available: usize, required: usize },
    #[error("question set count must be at least 1")]
    InvalidCount,
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("unknown question set {0}")]
    UnknownQuestion(u32),
    #[error("out of order: expected {expected}, got {got}")]
    OutOfOrder { expected: String, got: String },
    #[error("question set {index} {part} already answered in session {session_id}")]
    DuplicateResponse {
        session_id: String,
        index: u32,
        part: &'static str,
    },
    #[error("rating {0} outside 1..5")]
    InvalidRating(i64),
    #[error("{0} is not one of the candidates")]
    InvalidChoice(String),
    #[error("no complete session")]
    NoData,
    #[error("{path}:{line}: {message}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StudyError + '_ {
    move |source| StudyError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureQuestion {
    pub real_scene_id: String,
    pub candidates: Vec<String>,
    pub correct_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealismQuestion {
    pub painting_id: String,
    pub real_scene_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyQuestionSet {
    /// 1-based.
    pub index: u32,
    pub qs: StructureQuestion,
    pub qq: RealismQuestion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyDefinition {
    pub study_id: String,
    pub run_id: String,
    pub seed: u64,
    pub created_at: DateTime<Utc>,
    pub question_sets: Vec<StudyQuestionSet>,
    /// Image id to file, for every image shown.
    pub assets: BTreeMap<String, PathBuf>,
}

impl StudyDefinition {
    pub fn set(&self, index: u32) -> Option<&StudyQuestionSet> {
        self.question_sets.iter().find(|s| s.index == index)
    }
}

/// Samples `n` question sets from the paintings of `run` that reached the
/// real-scene stage. Target paintings are drawn without replacement; each
/// set's four distractors are drawn uniformly without replacement from the
/// other eligible paintings, and the five candidates are shuffled. Real-scene
/// images are exposed under random `scene-…` asset ids so that no identifier
/// shown to a participant points at the correct painting.
pub fn create_study(run: &RunRecord, n: usize, seed: u64) -> Result<StudyDefinition, StudyError> {
    if n == 0 {
        return Err(StudyError::InvalidCount);
    }
    let mut eligible: Vec<(&str, &Path, &Path)> = run
        .items
        .iter()
        .filter_map(|item| {
            let real = item.artifact(Stage::Refine)?;
            Some((item.painting_id.as_str(), item.painting_path.as_path(), real.path.as_path()))
        })
        .collect();
    eligible.sort_by(|a, b| a.0.cmp(b.0));
    let required = CANDIDATES.max(n);
    if eligible.len() < required {
        return Err(StudyError::NotEnoughMaterial {
            available: eligible.len(),
            required,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assets = BTreeMap::new();
    let mut question_sets = Vec::with_capacity(n);
    for (i, target) in index::sample(&mut rng, eligible.len(), n).into_iter().enumerate() {
        let (painting_id, _, real_path) = eligible[target];
        let others: Vec<usize> = (0..eligible.len()).filter(|&j| j != target).collect();
        let mut candidates: Vec<String> = index::sample(&mut rng, others.len(), CANDIDATES - 1)
            .into_iter()
            .map(|j| eligible[others[j]].0.to_owned())
            .collect();
        candidates.push(painting_id.to_owned());
        candidates.shuffle(&mut rng);
        for c in &candidates {
            let e = eligible.iter().find(|e| e.0 == c).expect("candidate is eligible");
            assets.insert(c.clone(), e.1.to_path_buf());
        }
        let scene = format!("scene-{:016x}", rng.random::<u64>());
        assets.insert(scene.clone(), real_path.to_path_buf());
        question_sets.push(StudyQuestionSet {
            index: i as u32 + 1,
            qs: StructureQuestion {
                real_scene_id: scene.clone(),
                candidates,
                correct_id: painting_id.to_owned(),
            },
            qq: RealismQuestion {
                painting_id: painting_id.to_owned(),
                real_scene_id: scene,
            },
        });
    }
    let key = format!("{}|{n}|{seed}", run.run_id);
    Ok(StudyDefinition {
        study_id: hash_parts(&[key.as_bytes()])[..16].to_owned(),
        run_id: run.run_id.clone(),
        seed,
        created_at: Utc::now(),
        question_sets,
        assets,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Answer {
    /// Structural identification: the chosen painting id.
    Qs { choice: String },
    /// Realism rating, 1 to 5.
    Qq { rating: i64 },
}

impl Answer {
    fn part(&self) -> &'static str {
        match self {
            Answer::Qs { .. } => "qs",
            Answer::Qq { .. } => "qq",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyResponse {
    pub session_id: String,
    pub question_index: u32,
    pub answer: Answer,
    pub submitted_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum LogEntry {
    SessionOpened {
        session_id: String,
        opened_at: DateTime<Utc>,
    },
    Response(StudyResponse),
}

/// What a participant sees next. Never carries the answer key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "phase", rename_all = "snake_case")]
pub enum NextQuestion {
    Qs {
        index: u32,
        total: u32,
        real_scene_id: String,
        candidates: Vec<String>,
    },
    Qq {
        index: u32,
        total: u32,
        painting_id: String,
        real_scene_id: String,
    },
    Done {
        total: u32,
    },
}

#[derive(Debug, Clone, Default, PartialEq)]
struct SetAnswers {
    qs: Option<String>,
    qq: Option<i64>,
}

type Sessions = BTreeMap<String, BTreeMap<u32, SetAnswers>>;

/// Position of a session in the fixed protocol order.
fn next_step(def: &StudyDefinition, answers: &BTreeMap<u32, SetAnswers>) -> Option<(u32, &'static str)> {
    for set in &def.question_sets {
        let a = answers.get(&set.index);
        if a.and_then(|a| a.qs.as_ref()).is_none() {
            return Some((set.index, "qs"));
        }
        if a.and_then(|a| a.qq).is_none() {
            return Some((set.index, "qq"));
        }
    }
    None
}

/// Checks `response` against the protocol and, if acceptable, applies it.
fn apply(def: &StudyDefinition, sessions: &mut Sessions, response: &StudyResponse) -> Result<(), StudyError> {
    let answers = sessions
        .get_mut(&response.session_id)
        .ok_or_else(|| StudyError::UnknownSession(response.session_id.clone()))?;
    let set = def
        .set(response.question_index)
        .ok_or(StudyError::UnknownQuestion(response.question_index))?;
    match &response.answer {
        Answer::Qq { rating } if !RATING_RANGE.contains(rating) => {
            return Err(StudyError::InvalidRating(*rating));
        }
        Answer::Qs { choice } if !set.qs.candidates.contains(choice) => {
            return Err(StudyError::InvalidChoice(choice.clone()));
        }
        _ => {}
    }
    let existing = answers.get(&response.question_index);
    let already = match &response.answer {
        Answer::Qs { .. } => existing.is_some_and(|a| a.qs.is_some()),
        Answer::Qq { .. } => existing.is_some_and(|a| a.qq.is_some()),
    };
    if already {
        return Err(StudyError::DuplicateResponse {
            session_id: response.session_id.clone(),
            index: response.question_index,
            part: response.answer.part(),
        });
    }
    let got = (response.question_index, response.answer.part());
    match next_step(def, answers) {
        Some(expected) if expected == got => {}
        expected => {
            return Err(StudyError::OutOfOrder {
                expected: expected.map_or("nothing (session complete)".to_owned(), |(i, p)| format!("{p} {i}")),
                got: format!("{} {}", got.1, got.0),
            })
        }
    }
    let slot = answers.entry(response.question_index).or_default();
    match &response.answer {
        Answer::Qs { choice } => slot.qs = Some(choice.clone()),
        Answer::Qq { rating } => slot.qq = Some(*rating),
    }
    Ok(())
}

struct LogState {
    sessions: Sessions,
    file: File,
}

/// A study directory opened for serving.
///
/// The response log is the single serialization point: every accepted
/// event is validated and appended as one line while holding the lock.
pub struct Study {
    dir: PathBuf,
    definition: StudyDefinition,
    log: Mutex<LogState>,
}

impl Study {
    /// Writes `definition` into `dir` (which must not already hold a study).
    pub fn create(dir: &Path, definition: StudyDefinition) -> Result<Self, StudyError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join(STUDY_FILE);
        if path.exists() {
            return Err(StudyError::Io {
                path,
                source: std::io::Error::new(std::io::ErrorKind::AlreadyExists, "study already exists"),
            });
        }
        let body = serde_json::to_vec_pretty(&definition).expect("definition serializes");
        fs::write(&path, body).map_err(io_err(&path))?;
        Self::open(dir)
    }

    /// Loads the definition and replays the response log.
    pub fn open(dir: &Path) -> Result<Self, StudyError> {
        let path = dir.join(STUDY_FILE);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        let definition: StudyDefinition = serde_json::from_slice(&bytes).map_err(|e| StudyError::Corrupt {
            path: path.clone(),
            line: 0,
            message: e.to_string(),
        })?;
        let log_path = dir.join(RESPONSES_FILE);
        let mut sessions = Sessions::new();
        if log_path.exists() {
            let reader = BufReader::new(File::open(&log_path).map_err(io_err(&log_path))?);
            for (i, line) in reader.lines().enumerate() {
                let line = line.map_err(io_err(&log_path))?;
                if line.trim().is_empty() {
                    continue;
                }
                let corrupt = |message: String| StudyError::Corrupt {
                    path: log_path.clone(),
                    line: i + 1,
                    message,
                };
                match serde_json::from_str(&line).map_err(|e| corrupt(e.to_string()))? {
                    LogEntry::SessionOpened { session_id, .. } => {
                        sessions.entry(session_id).or_default();
                    }
                    LogEntry::Response(r) => {
                        apply(&definition, &mut sessions, &r).map_err(|e| corrupt(e.to_string()))?
                    }
                }
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(io_err(&log_path))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            definition,
            log: Mutex::new(LogState { sessions, file }),
        })
    }

    pub fn definition(&self) -> &StudyDefinition {
        &self.definition
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn append(&self, state: &mut LogState, entry: &LogEntry) -> Result<(), StudyError> {
        let mut line = serde_json::to_vec(entry).expect("log entry serializes");
        line.push(b'\n');
        let path = self.dir.join(RESPONSES_FILE);
        state.file.write_all(&line).map_err(io_err(&path))?;
        state.file.flush().map_err(io_err(&path))
    }

    /// Opens a session with a random opaque token.
    pub fn open_session(&self) -> Result<String, StudyError> {
        let token = format!("{:032x}", rand::rng().random::<u128>());
        self.open_session_with_id(&token)?;
        Ok(token)
    }

    /// Opens a session under a caller-chosen id; reopening is a no-op.
    pub fn open_session_with_id(&self, session_id: &str) -> Result<(), StudyError> {
        let mut state = self.log.lock().unwrap();
        if state.sessions.contains_key(session_id) {
            return Ok(());
        }
        self.append(
            &mut state,
            &LogEntry::SessionOpened {
                session_id: session_id.to_owned(),
                opened_at: Utc::now(),
            },
        )?;
        state.sessions.insert(session_id.to_owned(), BTreeMap::new());
        Ok(())
    }

    pub fn has_session(&self, session_id: &str) -> bool {
        self.log.lock().unwrap().sessions.contains_key(session_id)
    }

    pub fn session_ids(&self) -> Vec<String> {
        self.log.lock().unwrap().sessions.keys().cloned().collect()
    }

    pub fn next_question(&self, session_id: &str) -> Result<NextQuestion, StudyError> {
        let state = self.log.lock().unwrap();
        let answers = state
            .sessions
            .get(session_id)
            .ok_or_else(|| StudyError::UnknownSession(session_id.to_owned()))?;
        let total = self.definition.question_sets.len() as u32;
        Ok(match next_step(&self.definition, answers) {
            None => NextQuestion::Done { total },
            Some((index, part)) => {
                let set = self.definition.set(index).expect("step refers to a set");
                if part == "qs" {
                    NextQuestion::Qs {
                        index,
                        total,
                        real_scene_id: set.qs.real_scene_id.clone(),
                        candidates: set.qs.candidates.clone(),
                    }
                } else {
                    NextQuestion::Qq {
                        index,
                        total,
                        painting_id: set.qq.painting_id.clone(),
                        real_scene_id: set.qq.real_scene_id.clone(),
                    }
                }
            }
        })
    }

    /// Validates and durably appends one answer.
    pub fn record_response(&self, response: StudyResponse) -> Result<(), StudyError> {
        let mut state = self.log.lock().unwrap();
        let mut trial = state.sessions.clone();
        apply(&self.definition, &mut trial, &response)?;
        self.append(&mut state, &LogEntry::Response(response))?;
        state.sessions = trial;
        Ok(())
    }

    /// Every accepted response, from a consistent snapshot of the log.
    pub fn responses(&self) -> Result<Vec<StudyResponse>, StudyError> {
        let _guard = self.log.lock().unwrap();
        self.read_responses()
    }

    fn read_responses(&self) -> Result<Vec<StudyResponse>, StudyError> {
        let path = self.dir.join(RESPONSES_FILE);
        let reader = BufReader::new(File::open(&path).map_err(io_err(&path))?);
        let mut out = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(io_err(&path))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: LogEntry = serde_json::from_str(&line).map_err(|e| StudyError::Corrupt {
                path: path.clone(),
                line: i + 1,
                message: e.to_string(),
            })?;
            if let LogEntry::Response(r) = entry {
                out.push(r);
            }
        }
        Ok(out)
    }

    /// Aggregates the current log and rewrites `aggregate.json`.
    pub fn aggregate(&self) -> Result<StudyAggregate, StudyError> {
        let _guard = self.log.lock().unwrap();
        let aggregate = aggregate_study(&self.definition, &self.read_responses()?)?;
        let path = self.dir.join(AGGREGATE_FILE);
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(&aggregate).expect("aggregate serializes"))
            .map_err(io_err(&tmp))?;
        fs::rename(&tmp, &path).map_err(io_err(&path))?;
        Ok(aggregate)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionAggregate {
    pub index: u32,
    /// `100 * correct / answered`.
    pub qs_percent: f64,
    pub qq_mean: f64,
    pub n_qs: usize,
    pub n_qq: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyAggregate {
    pub study_id: String,
    pub questions: Vec<QuestionAggregate>,
    pub qs_avg: f64,
    pub qq_avg: f64,
    /// Sessions with at least one answer.
    pub n_participants: usize,
    /// Sessions that answered every question.
    pub n_complete: usize,
}

fn to_f64(r: Ratio<i64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// Per-question accuracy and mean rating over every recorded answer
/// (sessions that dropped out still count for the questions they answered),
/// averaged across questions.
///
/// All arithmetic is done in exact rationals; each reported value is the
/// nearest `f64` to the exact result.
pub fn aggregate_study(definition: &StudyDefinition, responses: &[StudyResponse]) -> Result<StudyAggregate, StudyError> {
    let sets = definition.question_sets.len();
    let mut per_session: BTreeMap<&str, BTreeSet<(u32, &str)>> = BTreeMap::new();
    let mut correct = vec![0i64; sets];
    let mut answered = vec![0i64; sets];
    let mut rating_sum = vec![0i64; sets];
    let mut rated = vec![0i64; sets];
    for r in responses {
        let Some(pos) = definition.question_sets.iter().position(|s| s.index == r.question_index) else {
            continue;
        };
        per_session
            .entry(&r.session_id)
            .or_default()
            .insert((r.question_index, r.answer.part()));
        match &r.answer {
            Answer::Qs { choice } => {
                answered[pos] += 1;
                if *choice == definition.question_sets[pos].qs.correct_id {
                    correct[pos] += 1;
                }
            }
            Answer::Qq { rating } => {
                rated[pos] += 1;
                rating_sum[pos] += rating;
            }
        }
    }
    let n_complete = per_session.values().filter(|parts| parts.len() == 2 * sets).count();
    if n_complete == 0 {
        return Err(StudyError::NoData);
    }
    let mut questions = Vec::with_capacity(sets);
    let (mut qs_total, mut qq_total) = (Ratio::from_integer(0), Ratio::from_integer(0));
    for (pos, set) in definition.question_sets.iter().enumerate() {
        let qs = Ratio::new(100 * correct[pos], answered[pos]);
        let qq = Ratio::new(rating_sum[pos], rated[pos]);
        qs_total += qs;
        qq_total += qq;
        questions.push(QuestionAggregate {
            index: set.index,
            qs_percent: to_f64(qs),
            qq_mean: to_f64(qq),
            n_qs: answered[pos] as usize,
            n_qq: rated[pos] as usize,
        });
    }
    let n = Ratio::from_integer(sets as i64);
    Ok(StudyAggregate {
        study_id: definition.study_id.clone(),
        questions,
        qs_avg: to_f64(qs_total / n),
        qq_avg: to_f64(qq_total / n),
        n_participants: per_session.len(),
        n_complete,
    })
}
