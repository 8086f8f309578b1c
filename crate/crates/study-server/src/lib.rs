//! Versioned JSON API over study directories.
//!
//! | method | path | body |
//! |---|---|---|
//! | `POST` | `/study` | [`CreateStudyRequest`] |
//! | `POST` | `/session` | [`OpenSessionRequest`] |
//! | `GET` | `/session/{id}/next` | |
//! | `POST` | `/session/{id}/response` | [`ResponseRequest`] |
//! | `GET` | `/study/{id}/aggregate` | |
//! | `GET` | `/assets/{image_id}` | |
//!
//! Every JSON body, in both directions, carries `api_version`. Errors come
//! back as `{"api_version", "error": {"code", "message"}}`.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::Utc;
use p2d_core::pipeline::{PipelineError, RunRecord};
use p2d_core::study::{
    create_study, Answer, NextQuestion, Study, StudyAggregate, StudyError, StudyResponse, DEFAULT_QUESTION_SETS,
    STUDY_FILE,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const API_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("unsupported api_version {0}; this server speaks {API_VERSION}")]
    UnsupportedVersion(u32),
    #[error("unknown study {0}")]
    UnknownStudy(String),
    #[error("unknown asset {0}")]
    UnknownAsset(String),
    #[error("study {0} already exists")]
    StudyExists(String),
    #[error("cannot read run record: {0}")]
    RunRecord(#[from] PipelineError),
    #[error(transparent)]
    Study(#[from] StudyError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl ServerError {
    fn status(&self) -> (StatusCode, &'static str) {
        use StudyError as S;
        match self {
            Self::UnsupportedVersion(_) => (StatusCode::BAD_REQUEST, "unsupported_version"),
            Self::UnknownStudy(_) => (StatusCode::NOT_FOUND, "unknown_study"),
            Self::UnknownAsset(_) => (StatusCode::NOT_FOUND, "unknown_asset"),
            Self::StudyExists(_) => (StatusCode::CONFLICT, "study_exists"),
            Self::RunRecord(_) => (StatusCode::UNPROCESSABLE_ENTITY, "bad_run_record"),
            Self::Io { .. } => (StatusCode::INTERNAL_SERVER_ERROR, "io"),
            Self::Study(e) => match e {
                S::UnknownSession(_) => (StatusCode::NOT_FOUND, "unknown_session"),
                S::OutOfOrder { .. } => (StatusCode::CONFLICT, "out_of_order"),
                S::DuplicateResponse { .. } => (StatusCode::CONFLICT, "duplicate_response"),
                S::NoData => (StatusCode::CONFLICT, "no_data"),
                S::InvalidRating(_) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_rating"),
                S::InvalidChoice(_) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_choice"),
                S::UnknownQuestion(_) => (StatusCode::UNPROCESSABLE_ENTITY, "unknown_question"),
                S::NotEnoughMaterial { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "not_enough_material"),
                S::InvalidCount => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_count"),
                S::Corrupt { .. } | S::Io { .. } => (StatusCode::INTERNAL_SERVER_ERROR, "storage"),
            },
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorDetail {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub api_version: u32,
    pub error: ErrorDetail,
}

impl IntoResponse for ServerError {
    fn into_response(self) -> Response {
        let (status, code) = self.status();
        if status.is_server_error() {
            log::error!("{self}");
        }
        let body = ErrorBody {
            api_version: API_VERSION,
            error: ErrorDetail {
                code: code.to_owned(),
                message: self.to_string(),
            },
        };
        (status, Json(body)).into_response()
    }
}

fn check_version(v: u32) -> Result<(), ServerError> {
    if v == API_VERSION {
        Ok(())
    } else {
        Err(ServerError::UnsupportedVersion(v))
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CreateStudyRequest {
    pub api_version: u32,
    /// Path to a `run_record.json` on the server.
    pub run_record: PathBuf,
    #[serde(default = "default_sets")]
    pub n_question_sets: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_sets() -> usize {
    DEFAULT_QUESTION_SETS
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CreateStudyReply {
    pub api_version: u32,
    pub study_id: String,
    pub question_sets: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct OpenSessionRequest {
    pub api_version: u32,
    pub study_id: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct OpenSessionReply {
    pub api_version: u32,
    pub study_id: String,
    pub session_id: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct NextReply {
    pub api_version: u32,
    pub question: NextQuestion,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ResponseRequest {
    pub api_version: u32,
    pub question_index: u32,
    pub answer: Answer,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AggregateReply {
    pub api_version: u32,
    pub aggregate: StudyAggregate,
}

/// Open studies under one root directory, plus which study each session
/// belongs to.
pub struct Registry {
    root: PathBuf,
    studies: RwLock<BTreeMap<String, Arc<Study>>>,
    sessions: RwLock<HashMap<String, String>>,
}

impl Registry {
    /// Opens `root` itself if it holds a study, and every immediate
    /// subdirectory that does.
    pub fn load(root: &Path) -> Result<Self, ServerError> {
        let io = |source| ServerError::Io {
            path: root.to_path_buf(),
            source,
        };
        std::fs::create_dir_all(root).map_err(io)?;
        let mut dirs = vec![root.to_path_buf()];
        for entry in std::fs::read_dir(root).map_err(io)? {
            let path = entry.map_err(io)?.path();
            if path.is_dir() {
                dirs.push(path);
            }
        }
        let registry = Self {
            root: root.to_path_buf(),
            studies: RwLock::default(),
            sessions: RwLock::default(),
        };
        for dir in dirs.into_iter().filter(|d| d.join(STUDY_FILE).is_file()) {
            registry.insert(Study::open(&dir)?);
        }
        Ok(registry)
    }

    fn insert(&self, study: Study) -> Arc<Study> {
        let id = study.definition().study_id.clone();
        let mut sessions = self.sessions.write().unwrap();
        for s in study.session_ids() {
            sessions.insert(s, id.clone());
        }
        let study = Arc::new(study);
        self.studies.write().unwrap().insert(id, Arc::clone(&study));
        study
    }

    pub fn study_ids(&self) -> Vec<String> {
        self.studies.read().unwrap().keys().cloned().collect()
    }

    pub fn study(&self, id: &str) -> Result<Arc<Study>, ServerError> {
        self.studies
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ServerError::UnknownStudy(id.to_owned()))
    }

    fn study_for_session(&self, session_id: &str) -> Result<Arc<Study>, ServerError> {
        let study_id = self
            .sessions
            .read()
            .unwrap()
            .get(session_id)
            .cloned()
            .ok_or_else(|| StudyError::UnknownSession(session_id.to_owned()))?;
        self.study(&study_id)
    }

    fn asset_path(&self, image_id: &str) -> Option<PathBuf> {
        self.studies
            .read()
            .unwrap()
            .values()
            .find_map(|s| s.definition().assets.get(image_id).cloned())
    }
}

async fn create_study_handler(
    State(reg): State<Arc<Registry>>,
    Json(req): Json<CreateStudyRequest>,
) -> Result<(StatusCode, Json<CreateStudyReply>), ServerError> {
    check_version(req.api_version)?;
    let record = RunRecord::load(&req.run_record)?;
    let definition = create_study(&record, req.n_question_sets, req.seed)?;
    let id = definition.study_id.clone();
    if reg.study(&id).is_ok() {
        return Err(ServerError::StudyExists(id));
    }
    let sets = definition.question_sets.len();
    let study = Study::create(&reg.root.join(&id), definition)?;
    reg.insert(study);
    Ok((
        StatusCode::CREATED,
        Json(CreateStudyReply {
            api_version: API_VERSION,
            study_id: id,
            question_sets: sets,
        }),
    ))
}

async fn open_session_handler(
    State(reg): State<Arc<Registry>>,
    Json(req): Json<OpenSessionRequest>,
) -> Result<(StatusCode, Json<OpenSessionReply>), ServerError> {
    check_version(req.api_version)?;
    let study = reg.study(&req.study_id)?;
    let session_id = study.open_session()?;
    reg.sessions.write().unwrap().insert(session_id.clone(), req.study_id.clone());
    Ok((
        StatusCode::CREATED,
        Json(OpenSessionReply {
            api_version: API_VERSION,
            study_id: req.study_id,
            session_id,
        }),
    ))
}

async fn next_handler(
    State(reg): State<Arc<Registry>>,
    UrlPath(session_id): UrlPath<String>,
) -> Result<Json<NextReply>, ServerError> {
    let study = reg.study_for_session(&session_id)?;
    Ok(Json(NextReply {
        api_version: API_VERSION,
        question: study.next_question(&session_id)?,
    }))
}

async fn response_handler(
    State(reg): State<Arc<Registry>>,
    UrlPath(session_id): UrlPath<String>,
    Json(req): Json<ResponseRequest>,
) -> Result<Json<NextReply>, ServerError> {
    check_version(req.api_version)?;
    let study = reg.study_for_session(&session_id)?;
    study.record_response(StudyResponse {
        session_id: session_id.clone(),
        question_index: req.question_index,
        answer: req.answer,
        submitted_at: Utc::now(),
    })?;
    Ok(Json(NextReply {
        api_version: API_VERSION,
        question: study.next_question(&session_id)?,
    }))
}

async fn aggregate_handler(
    State(reg): State<Arc<Registry>>,
    UrlPath(study_id): UrlPath<String>,
) -> Result<Json<AggregateReply>, ServerError> {
    let study = reg.study(&study_id)?;
    Ok(Json(AggregateReply {
        api_version: API_VERSION,
        aggregate: study.aggregate()?,
    }))
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        _ => "application/octet-stream",
    }
}

async fn asset_handler(
    State(reg): State<Arc<Registry>>,
    UrlPath(image_id): UrlPath<String>,
) -> Result<Response, ServerError> {
    let path = reg
        .asset_path(&image_id)
        .ok_or_else(|| ServerError::UnknownAsset(image_id.clone()))?;
    let bytes = tokio::fs::read(&path).await.map_err(|source| ServerError::Io {
        path: path.clone(),
        source,
    })?;
    Ok(([(header::CONTENT_TYPE, content_type(&path))], bytes).into_response())
}

pub fn router(registry: Arc<Registry>) -> Router {
    Router::new()
        .route("/study", post(create_study_handler))
        .route("/session", post(open_session_handler))
        .route("/session/{id}/next", get(next_handler))
        .route("/session/{id}/response", post(response_handler))
        .route("/study/{id}/aggregate", get(aggregate_handler))
        .route("/assets/{image_id}", get(asset_handler))
        .with_state(registry)
}

/// Serves every study under `root` until the process is stopped.
pub async fn serve(root: &Path, addr: SocketAddr) -> Result<(), ServerError> {
    let registry = Arc::new(Registry::load(root)?);
    log::info!("serving {} studies from {} on {addr}", registry.study_ids().len(), root.display());
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(|source| ServerError::Io {
        path: root.to_path_buf(),
        source,
    })?;
    axum::serve(listener, router(registry)).await.map_err(|source| ServerError::Io {
        path: root.to_path_buf(),
        source,
    })
}
