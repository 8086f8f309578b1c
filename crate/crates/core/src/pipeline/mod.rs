//! End-to-end runs: match paintings to photos, train the translator, then
//! for every painting translate, refine, estimate depth and export.
//!
//! Output layout under `output_root`:
//!
//! ```text
//! matched.jsonl               matched dataset manifest
//! train/                      checkpoints and losses.csv
//! pseudo_real/<id>.pseudo_real.png
//! real_scene/<id>.real_scene.png
//! depth/<id>.depth.png        16-bit normalized relative inverse depth
//! mesh/<id>.relief.stl        only when a mesh is configured
//! stages.json                 resume state
//! run_record.json             the last RunRecord
//! ```
//!
//! A stage is skipped when the hash of its inputs matches the one recorded
//! for its last successful execution and every artifact it produced is still
//! on disk with the recorded checksum.

mod config;
mod sweep;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use chrono::{DateTime, Utc};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{
    checksum_bytes, load_manifest, save_manifest, write_manifest, CorpusError, DatasetManifest, DomainTag,
    ImageRecord,
};
use crate::depth::{
    depth_to_relief_mesh, estimate_depth, export_depth_png16, import_depth_png16, normalize_depth, DepthBackend,
    DepthError,
};
use crate::imaging::{Image, ImagingError};
use crate::matcher::{
    build_clip_matched_dataset, default_dictionary, Dictionary, EmbeddingCache, MatchError, MatchingContext,
};
use crate::refine::{refine, BackendConcurrency, RefineBackend, RefineError, RefineRequest};
use crate::translation::{
    derived_id, load_checkpoint, train, translate_to_pseudo_real, RunTarget, TrainingData, TranslationError,
    TranslatorPair,
};

pub use config::{
    BackendSpec, DepthSettings, MeshSettings, PipelineConfig, RefineSettings, CONFIG_VERSION,
};
pub use sweep::{dedupe_k_values, k_sweep, write_comparison_sheet, SweepRow, COMPARISON_FILE};

pub const RUN_RECORD_FILE: &str = "run_record.json";
const STATE_FILE: &str = "stages.json";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid pipeline configuration: {0}")]
    Config(String),
    #[error("config field `{field}` points to a missing path: {path}")]
    MissingPath { field: &'static str, path: PathBuf },
    #[error("{stage} stage failed: {message}")]
    StageFailed { stage: Stage, message: String },
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Translation(#[from] TranslationError),
    #[error(transparent)]
    Refine(#[from] RefineError),
    #[error(transparent)]
    Depth(#[from] DepthError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error("{path}: {message}")]
    State { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl PipelineError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Match,
    Train,
    Translate,
    Refine,
    Depth,
    Mesh,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Match,
        Stage::Train,
        Stage::Translate,
        Stage::Refine,
        Stage::Depth,
        Stage::Mesh,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Match => "match",
            Stage::Train => "train",
            Stage::Translate => "translate",
            Stage::Refine => "refine",
            Stage::Depth => "depth",
            Stage::Mesh => "mesh",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.pad(self.as_str())
    }
}

/// SHA-256 over length-prefixed parts.
pub fn hash_parts(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

/// Hash of a manifest's records and pairs, ignoring its name, timestamp and
/// provenance note.
pub fn manifest_content_hash(manifest: &DatasetManifest) -> String {
    let body = DatasetManifest {
        name: String::new(),
        provenance_note: String::new(),
        created_at: DateTime::<Utc>::UNIX_EPOCH,
        ..manifest.clone()
    };
    let mut bytes = Vec::new();
    write_manifest(&body, &mut bytes).expect("in-memory write");
    hash_parts(&[&bytes])
}

/// Content hash of a file, or of a directory's files (non-recursive).
pub fn artifact_checksum(path: &Path) -> Option<String> {
    if path.is_file() {
        return fs::read(path).ok().map(|b| checksum_bytes(&b));
    }
    let mut files: Vec<(String, String)> = fs::read_dir(path)
        .ok()?
        .filter_map(Result::ok)
        .filter(|e| e.path().is_file())
        .map(|e| {
            let bytes = fs::read(e.path()).ok()?;
            Some((e.file_name().to_string_lossy().into_owned(), checksum_bytes(&bytes)))
        })
        .collect::<Option<_>>()?;
    files.sort();
    let flat: Vec<&[u8]> = files.iter().flat_map(|(n, c)| [n.as_bytes(), c.as_bytes()]).collect();
    Some(hash_parts(&flat))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub id: String,
    pub path: PathBuf,
    pub checksum: String,
}

impl Artifact {
    fn at(id: impl Into<String>, path: &Path) -> Result<Self, PipelineError> {
        let checksum = artifact_checksum(path).ok_or_else(|| PipelineError::State {
            path: path.to_path_buf(),
            message: "artifact missing right after it was written".into(),
        })?;
        Ok(Self {
            id: id.into(),
            path: path.to_path_buf(),
            checksum,
        })
    }

    fn from_record(r: &ImageRecord) -> Self {
        Self {
            id: r.id.clone(),
            path: r.path.clone(),
            checksum: r.checksum.clone(),
        }
    }

    fn is_intact(&self) -> bool {
        artifact_checksum(&self.path).as_deref() == Some(self.checksum.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Computed,
    Skipped,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageOutcome {
    pub stage: Stage,
    pub status: StageStatus,
    pub input_hash: String,
    pub artifacts: Vec<Artifact>,
    /// Structure score for the refine stage.
    pub score: Option<f64>,
    pub seconds: f64,
    pub finished_at: DateTime<Utc>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounter {
    pub computed: usize,
    pub skipped: usize,
    pub failed: usize,
}

/// Everything produced for one painting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub painting_id: String,
    pub painting_path: PathBuf,
    pub stages: Vec<StageOutcome>,
    pub structure_score: Option<f64>,
    pub error: Option<String>,
}

impl ItemRecord {
    pub fn artifact(&self, stage: Stage) -> Option<&Artifact> {
        self.stages
            .iter()
            .find(|s| s.stage == stage && s.status != StageStatus::Failed)
            .and_then(|s| s.artifacts.first())
    }

    pub fn status(&self, stage: Stage) -> Option<StageStatus> {
        self.stages.iter().find(|s| s.stage == stage).map(|s| s.status)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub painting_id: String,
    pub stage: Stage,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
    pub config_hash: String,
    pub k: usize,
    pub tool_versions: BTreeMap<String, String>,
    pub output_root: PathBuf,
    pub matched_manifest: PathBuf,
    pub checkpoint: PathBuf,
    /// Match and train.
    pub global_stages: Vec<StageOutcome>,
    pub items: Vec<ItemRecord>,
    pub counters: BTreeMap<Stage, StageCounter>,
    pub stage_seconds: BTreeMap<Stage, f64>,
    pub failures: Vec<Failure>,
}

impl RunRecord {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let bytes = fs::read(path).map_err(|e| PipelineError::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| PipelineError::State {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        write_atomically(path, &serde_json::to_vec_pretty(self).expect("record serializes"))
    }

    pub fn counter(&self, stage: Stage) -> StageCounter {
        self.counters.get(&stage).copied().unwrap_or_default()
    }

    /// Paintings whose every stage succeeded.
    pub fn completed_items(&self) -> impl Iterator<Item = &ItemRecord> {
        self.items.iter().filter(|i| i.error.is_none())
    }
}

fn write_atomically(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| PipelineError::io(parent, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| PipelineError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| PipelineError::io(path, e))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StageEntry {
    input_hash: String,
    artifacts: Vec<Artifact>,
    score: Option<f64>,
}

/// Resume state plus run-wide counters. The state file is rewritten after
/// every completed stage so an interrupted run loses at most one stage.
struct Runner {
    state_path: PathBuf,
    state: Mutex<BTreeMap<String, StageEntry>>,
    counters: Mutex<BTreeMap<Stage, StageCounter>>,
    seconds: Mutex<BTreeMap<Stage, f64>>,
}

type Computed = (Vec<Artifact>, Option<f64>);

impl Runner {
    fn open(root: &Path) -> Result<Self, PipelineError> {
        let state_path = root.join(STATE_FILE);
        let state = match fs::read(&state_path) {
            Ok(bytes) => serde_json::from_slice(&bytes).unwrap_or_else(|e| {
                log::warn!("ignoring unreadable resume state {}: {e}", state_path.display());
                BTreeMap::new()
            }),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => BTreeMap::new(),
            Err(e) => return Err(PipelineError::io(&state_path, e)),
        };
        Ok(Self {
            state_path,
            state: Mutex::new(state),
            counters: Mutex::new(BTreeMap::new()),
            seconds: Mutex::new(BTreeMap::new()),
        })
    }

    fn run_stage(
        &self,
        stage: Stage,
        item: &str,
        input_hash: String,
        compute: impl FnOnce() -> Result<Computed, PipelineError>,
    ) -> StageOutcome {
        let key = format!("{stage}:{item}");
        let clock = Instant::now();
        let cached = self
            .state
            .lock()
            .unwrap()
            .get(&key)
            .filter(|e| e.input_hash == input_hash && e.artifacts.iter().all(Artifact::is_intact))
            .cloned();
        let (status, artifacts, score, error) = match cached {
            Some(entry) => (StageStatus::Skipped, entry.artifacts, entry.score, None),
            None => match compute() {
                Ok((artifacts, score)) => {
                    let entry = StageEntry {
                        input_hash: input_hash.clone(),
                        artifacts: artifacts.clone(),
                        score,
                    };
                    let mut state = self.state.lock().unwrap();
                    state.insert(key, entry);
                    if let Err(e) = self.persist(&state) {
                        log::warn!("could not persist resume state: {e}");
                    }
                    (StageStatus::Computed, artifacts, score, None)
                }
                Err(e) => (StageStatus::Failed, Vec::new(), None, Some(e.to_string())),
            },
        };
        let seconds = clock.elapsed().as_secs_f64();
        {
            let mut counters = self.counters.lock().unwrap();
            let c = counters.entry(stage).or_default();
            match status {
                StageStatus::Computed => c.computed += 1,
                StageStatus::Skipped => c.skipped += 1,
                StageStatus::Failed => c.failed += 1,
            }
        }
        *self.seconds.lock().unwrap().entry(stage).or_default() += seconds;
        StageOutcome {
            stage,
            status,
            input_hash,
            artifacts,
            score,
            seconds,
            finished_at: Utc::now(),
            error,
        }
    }

    fn persist(&self, state: &BTreeMap<String, StageEntry>) -> Result<(), PipelineError> {
        write_atomically(&self.state_path, &serde_json::to_vec(state).expect("state serializes"))
    }
}

/// Shared, read-only inputs of the per-painting stages.
struct ItemContext<'a> {
    config: &'a PipelineConfig,
    runner: &'a Runner,
    pair: &'a TranslatorPair,
    checkpoint: &'a Artifact,
    refiner: &'a dyn RefineBackend,
    depth: &'a dyn DepthBackend,
}

fn item_seed(base: u64, painting_id: &str) -> u64 {
    let digest = Sha256::digest(painting_id.as_bytes());
    base ^ u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

impl ItemContext<'_> {
    fn process(&self, painting: &ImageRecord) -> ItemRecord {
        let mut record = ItemRecord {
            painting_id: painting.id.clone(),
            painting_path: painting.path.clone(),
            stages: Vec::new(),
            structure_score: None,
            error: None,
        };
        let root = &self.config.output_root;
        let cfg = self.config;
        let runner = self.runner;

        let size = cfg.train.image_size.to_string();
        let translated = runner.run_stage(
            Stage::Translate,
            &painting.id,
            hash_parts(&[b"translate", self.checkpoint.checksum.as_bytes(), painting.checksum.as_bytes(), size.as_bytes()]),
            || {
                let rec = translate_to_pseudo_real(self.pair, painting, cfg.train.image_size, &root.join("pseudo_real"))?;
                Ok((vec![Artifact::from_record(&rec)], None))
            },
        );
        let Some(pseudo) = self.advance(&mut record, translated) else {
            return record;
        };

        let refiner_owned;
        let refiner: &dyn RefineBackend = match self.refiner.concurrency() {
            BackendConcurrency::Shared => self.refiner,
            BackendConcurrency::PerWorker => {
                refiner_owned = cfg.refine.backend.refiner();
                refiner_owned.as_ref()
            }
        };
        let seed = item_seed(cfg.seed, &painting.id);
        let settings = format!("{}|{}|{}|{seed}", refiner.id(), cfg.refine.steps, cfg.refine.strength);
        let refined = runner.run_stage(
            Stage::Refine,
            &painting.id,
            hash_parts(&[b"refine", painting.checksum.as_bytes(), pseudo.checksum.as_bytes(), settings.as_bytes()]),
            || {
                let reference = Image::open(&pseudo.path)?;
                let content = Image::open(&painting.path)?.resized(reference.width(), reference.height());
                let request = RefineRequest {
                    content,
                    reference,
                    steps: cfg.refine.steps,
                    strength: cfg.refine.strength,
                    seed,
                };
                let id = derived_id(&painting.id, DomainTag::RealScene);
                let result = refine(&request, refiner, &id, &root.join("real_scene"))?;
                Ok((vec![Artifact::from_record(&result.real_scene)], Some(result.structure_score)))
            },
        );
        record.structure_score = refined.score;
        let Some(real) = self.advance(&mut record, refined) else {
            return record;
        };

        let depth_owned;
        let depth: &dyn DepthBackend = match self.depth.concurrency() {
            BackendConcurrency::Shared => self.depth,
            BackendConcurrency::PerWorker => {
                depth_owned = cfg.depth.backend.depth();
                depth_owned.as_ref()
            }
        };
        let depth_id = format!("{}.depth", painting.id);
        let depth_path = root.join("depth").join(format!("{depth_id}.png"));
        let estimated = runner.run_stage(
            Stage::Depth,
            &painting.id,
            hash_parts(&[b"depth", real.checksum.as_bytes(), depth.id().as_bytes()]),
            || {
                let image = Image::open(&real.path)?;
                let map = normalize_depth(&estimate_depth(&image, &real.id, depth)?);
                export_depth_png16(&map, &depth_path)?;
                Ok((vec![Artifact::at(depth_id.clone(), &depth_path)?], None))
            },
        );
        let Some(depth_artifact) = self.advance(&mut record, estimated) else {
            return record;
        };

        if let Some(mesh) = &cfg.depth.mesh {
            let mesh_id = format!("{}.relief", painting.id);
            let mesh_path = root.join("mesh").join(format!("{mesh_id}.stl"));
            let params = format!("{}|{}|{}", mesh.pitch_mm, mesh.relief_height_mm, mesh.base_thickness_mm);
            let meshed = runner.run_stage(
                Stage::Mesh,
                &painting.id,
                hash_parts(&[b"mesh", depth_artifact.checksum.as_bytes(), params.as_bytes()]),
                || {
                    let map = import_depth_png16(&depth_artifact.path, &depth_artifact.id)?;
                    let relief =
                        depth_to_relief_mesh(&map, mesh.pitch_mm, mesh.relief_height_mm, mesh.base_thickness_mm)?;
                    fs::create_dir_all(root.join("mesh")).map_err(|e| PipelineError::io(&root.join("mesh"), e))?;
                    relief.save_stl(&mesh_path)?;
                    Ok((vec![Artifact::at(mesh_id.clone(), &mesh_path)?], None))
                },
            );
            self.advance(&mut record, meshed);
        }
        record
    }

    /// Records the outcome; returns its first artifact unless it failed.
    fn advance(&self, record: &mut ItemRecord, outcome: StageOutcome) -> Option<Artifact> {
        if let Some(err) = &outcome.error {
            log::warn!("{} failed for {}: {err}", outcome.stage, record.painting_id);
            record.error = Some(format!("{}: {err}", outcome.stage));
        }
        let artifact = outcome.artifacts.first().cloned();
        let failed = outcome.status == StageStatus::Failed;
        record.stages.push(outcome);
        if failed {
            None
        } else {
            artifact
        }
    }
}

fn require(outcome: &StageOutcome) -> Result<&Artifact, PipelineError> {
    match (&outcome.error, outcome.artifacts.first()) {
        (None, Some(a)) => Ok(a),
        (err, _) => Err(PipelineError::StageFailed {
            stage: outcome.stage,
            message: err.clone().unwrap_or_else(|| "no output".into()),
        }),
    }
}

/// Runs (or resumes) the whole flow for `config`.
///
/// Matching and training are run once for all paintings; if either fails the
/// run stops. The per-painting stages run on a pool of `config.workers`
/// threads, and a failure there is recorded on that painting while the
/// others continue.
pub fn run_full(config: &PipelineConfig) -> Result<RunRecord, PipelineError> {
    config.validate()?;
    let started_at = Utc::now();
    let root = &config.output_root;
    fs::create_dir_all(root).map_err(|e| PipelineError::io(root, e))?;
    let runner = Runner::open(root)?;

    let paintings = load_manifest(&config.paintings_manifest)?;
    let photos = load_manifest(&config.photos_manifest)?;
    let dictionary = match &config.dictionary {
        Some(p) => Dictionary::load(p)?,
        None => default_dictionary(),
    };
    let text_encoder = config.encoder.text_encoder();
    let image_encoder = config.encoder.image_encoder();
    let refiner = config.refine.backend.refiner();
    let depth = config.depth.backend.depth();

    let mut tool_versions = BTreeMap::new();
    tool_versions.insert("p2d-core".to_owned(), env!("CARGO_PKG_VERSION").to_owned());
    tool_versions.insert("text_encoder".to_owned(), text_encoder.version().to_owned());
    tool_versions.insert("image_encoder".to_owned(), image_encoder.version().to_owned());
    tool_versions.insert("dictionary".to_owned(), dictionary.version.clone());
    tool_versions.insert("refine_backend".to_owned(), refiner.id());
    tool_versions.insert("depth_backend".to_owned(), depth.id());

    let matched_path = root.join("matched.jsonl");
    let dictionary_text = dictionary.to_text();
    let match_inputs = format!(
        "{}|{}|{}|{}|{}",
        config.k,
        text_encoder.version(),
        image_encoder.version(),
        config.temperature,
        dictionary_text
    );
    let match_outcome = runner.run_stage(
        Stage::Match,
        "all",
        hash_parts(&[
            b"match",
            manifest_content_hash(&paintings).as_bytes(),
            manifest_content_hash(&photos).as_bytes(),
            match_inputs.as_bytes(),
        ]),
        || {
            let cache = EmbeddingCache::from_env();
            let ctx = MatchingContext {
                text_encoder: text_encoder.as_ref(),
                image_encoder: image_encoder.as_ref(),
                cache: &cache,
                temperature: config.temperature,
            };
            let matched = build_clip_matched_dataset(&paintings, &photos, &dictionary, config.k, &ctx)?;
            save_manifest(&matched, &matched_path)?;
            Ok((vec![Artifact::at("matched", &matched_path)?], None))
        },
    );
    require(&match_outcome)?;
    let matched = load_manifest(&matched_path)?;
    let matched_hash = manifest_content_hash(&matched);

    let train_dir = root.join("train");
    let train_inputs = serde_json::to_vec(&(&config.train, config.seed)).expect("train config serializes");
    let train_outcome = runner.run_stage(
        Stage::Train,
        "all",
        hash_parts(&[b"train", matched_hash.as_bytes(), &train_inputs]),
        || {
            if train_dir.exists() {
                fs::remove_dir_all(&train_dir).map_err(|e| PipelineError::io(&train_dir, e))?;
            }
            let data = TrainingData::from_manifest(&matched, config.train.image_size)?;
            let mut pair = TranslatorPair::new(&config.train.architecture, config.seed);
            let outcome = train(
                &mut pair,
                &data,
                &config.train,
                Some(RunTarget {
                    root: &train_dir,
                    dictionary_hash: Some(hash_parts(&[dictionary_text.as_bytes()])),
                    manifest_hash: Some(matched_hash.clone()),
                }),
            )?;
            let last = outcome.checkpoints.last().expect("train writes a final checkpoint");
            Ok((vec![Artifact::at("checkpoint", last)?], None))
        },
    );
    let checkpoint = require(&train_outcome)?.clone();
    let (pair, _) = load_checkpoint(&checkpoint.path)?;

    let painting_records: Vec<&ImageRecord> = matched.records_with_tag(DomainTag::Painting).collect();
    let ctx = ItemContext {
        config,
        runner: &runner,
        pair: &pair,
        checkpoint: &checkpoint,
        refiner: refiner.as_ref(),
        depth: depth.as_ref(),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| PipelineError::Config(format!("worker pool: {e}")))?;
    let items: Vec<ItemRecord> = pool.install(|| painting_records.par_iter().map(|p| ctx.process(p)).collect());

    let failures = items
        .iter()
        .flat_map(|item| {
            item.stages.iter().filter_map(|s| {
                s.error.as_ref().map(|m| Failure {
                    painting_id: item.painting_id.clone(),
                    stage: s.stage,
                    message: m.clone(),
                })
            })
        })
        .collect::<Vec<_>>();
    if !failures.is_empty() {
        log::warn!("{} of {} paintings failed", failures.len(), items.len());
    }

    let config_hash = config.hash();
    let record = RunRecord {
        run_id: format!("{}-{}", &config_hash[..12], started_at.format("%Y%m%dT%H%M%S%.3fZ")),
        started_at,
        finished_at: Utc::now(),
        config_hash,
        k: config.k,
        tool_versions,
        output_root: root.clone(),
        matched_manifest: matched_path,
        checkpoint: checkpoint.path.clone(),
        global_stages: vec![match_outcome, train_outcome],
        items,
        counters: runner.counters.into_inner().unwrap(),
        stage_seconds: runner.seconds.into_inner().unwrap(),
        failures,
    };
    record.save(&root.join(RUN_RECORD_FILE))?;
    Ok(record)
}
