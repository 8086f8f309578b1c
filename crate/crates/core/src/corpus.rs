//! Image corpora and dataset manifests.
//!
//! A manifest is a line-delimited JSON document: a header object followed by
//! one object per record and one per pair. Record ids are derived from the
//! relative path and the content hash, so re-ingesting the same tree on a
//! different machine produces the same ids.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use walkdir::WalkDir;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("no decodable images under {0}")]
    EmptyCorpus(PathBuf),
    #[error("manifest not found: {0}")]
    NotFound(PathBuf),
    #[error("incompatible manifest {path}: {reason}")]
    IncompatibleManifest { path: PathBuf, reason: String },
    #[error("invalid manifest: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CorpusError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainTag {
    Painting,
    Photo,
    PseudoReal,
    RealScene,
}

impl DomainTag {
    pub fn as_str(self) -> &'static str {
        match self {
            DomainTag::Painting => "painting",
            DomainTag::Photo => "photo",
            DomainTag::PseudoReal => "pseudo_real",
            DomainTag::RealScene => "real_scene",
        }
    }
}

impl fmt::Display for DomainTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for DomainTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "painting" => Ok(DomainTag::Painting),
            "photo" => Ok(DomainTag::Photo),
            "pseudo_real" => Ok(DomainTag::PseudoReal),
            "real_scene" => Ok(DomainTag::RealScene),
            other => Err(format!("unknown domain tag `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub domain_tag: DomainTag,
    pub path: PathBuf,
    pub width: u32,
    pub height: u32,
    pub checksum: String,
}

impl ImageRecord {
    /// Builds a record for an image file that lives at `path`, deriving the id
    /// from `relative` (forward-slash separated) and the content hash.
    pub fn from_bytes(
        domain_tag: DomainTag,
        path: PathBuf,
        relative: &str,
        bytes: &[u8],
        width: u32,
        height: u32,
    ) -> Self {
        let checksum = checksum_bytes(bytes);
        Self {
            id: derive_id(relative, &checksum),
            domain_tag,
            path,
            width,
            height,
            checksum,
        }
    }

    /// Recomputes the content hash and compares it to the stored one.
    pub fn verify_checksum(&self) -> Result<bool, CorpusError> {
        let bytes = fs::read(&self.path).map_err(|e| CorpusError::io(&self.path, e))?;
        Ok(checksum_bytes(&bytes) == self.checksum)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pair {
    pub painting_id: String,
    pub photo_id: String,
    pub rank: u32,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    pub records: Vec<ImageRecord>,
    pub pairs: Vec<Pair>,
    pub created_at: DateTime<Utc>,
    pub provenance_note: String,
}

impl DatasetManifest {
    pub fn new(name: impl Into<String>, provenance_note: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            records: Vec::new(),
            pairs: Vec::new(),
            created_at: Utc::now(),
            provenance_note: provenance_note.into(),
        }
    }

    pub fn record(&self, id: &str) -> Option<&ImageRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn records_with_tag(&self, tag: DomainTag) -> impl Iterator<Item = &ImageRecord> {
        self.records.iter().filter(move |r| r.domain_tag == tag)
    }

    /// Pairs grouped by painting, each group ordered by rank.
    pub fn pairs_by_painting(&self) -> BTreeMap<&str, Vec<&Pair>> {
        let mut groups: BTreeMap<&str, Vec<&Pair>> = BTreeMap::new();
        for pair in &self.pairs {
            groups.entry(pair.painting_id.as_str()).or_default().push(pair);
        }
        for group in groups.values_mut() {
            group.sort_by_key(|p| p.rank);
        }
        groups
    }

    /// Deterministic subset of `n` records (all records if `n` exceeds the
    /// count). Pairs are dropped because they may reference removed records.
    pub fn sampled(&self, n: usize, seed: u64) -> Self {
        if n >= self.records.len() {
            return Self {
                pairs: Vec::new(),
                ..self.clone()
            };
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked = index::sample(&mut rng, self.records.len(), n).into_vec();
        picked.sort_unstable();
        Self {
            name: self.name.clone(),
            records: picked.into_iter().map(|i| self.records[i].clone()).collect(),
            pairs: Vec::new(),
            created_at: self.created_at,
            provenance_note: format!("{} (sampled {n} with seed {seed})", self.provenance_note),
        }
    }

    /// Checks every structural invariant of the manifest.
    pub fn validate(&self) -> Result<(), CorpusError> {
        let mut ids = HashSet::with_capacity(self.records.len());
        for r in &self.records {
            if !ids.insert(r.id.as_str()) {
                return Err(CorpusError::Invalid(format!("duplicate record id {}", r.id)));
            }
            if r.width == 0 || r.height == 0 {
                return Err(CorpusError::Invalid(format!("record {} has zero size", r.id)));
            }
        }
        for p in &self.pairs {
            for id in [&p.painting_id, &p.photo_id] {
                if !ids.contains(id.as_str()) {
                    return Err(CorpusError::Invalid(format!("pair references unknown id {id}")));
                }
            }
        }
        for (painting, group) in self.pairs_by_painting() {
            for (i, pair) in group.iter().enumerate() {
                if pair.rank as usize != i + 1 {
                    return Err(CorpusError::Invalid(format!(
                        "ranks for painting {painting} are not contiguous from 1"
                    )));
                }
                if i > 0 && !(group[i - 1].score >= pair.score) {
                    return Err(CorpusError::Invalid(format!(
                        "scores for painting {painting} increase with rank"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Hex SHA-256 of `bytes`.
pub fn checksum_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Stable record id from a relative path and a content checksum.
pub fn derive_id(relative: &str, checksum: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(relative.as_bytes());
    hasher.update([0u8]);
    hasher.update(checksum.as_bytes());
    hex::encode(&hasher.finalize()[..16])
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkippedFile {
    pub path: PathBuf,
    pub reason: String,
}

/// Result of scanning a directory tree.
#[derive(Debug, Clone)]
pub struct Ingested {
    pub manifest: DatasetManifest,
    /// Files with an image extension that failed to decode.
    pub skipped: Vec<SkippedFile>,
    /// Files ignored because they do not look like images.
    pub non_image_count: usize,
}

/// Scans `root` recursively and builds one record per decodable image.
pub fn ingest_directory(root: &Path, domain_tag: DomainTag) -> Result<Ingested, CorpusError> {
    if !root.is_dir() {
        return Err(CorpusError::NotFound(root.to_path_buf()));
    }
    let mut candidates = Vec::new();
    let mut non_image_count = 0usize;
    for entry in WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| CorpusError::Io {
            path: root.to_path_buf(),
            source: e.into(),
        })?;
        if !entry.file_type().is_file() {
            continue;
        }
        let is_image = entry
            .path()
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        if is_image {
            candidates.push(entry.into_path());
        } else {
            non_image_count += 1;
        }
    }
    if non_image_count > 0 {
        log::warn!("{}: ignored {non_image_count} non-image files", root.display());
    }

    let scanned: Vec<Result<ImageRecord, SkippedFile>> = candidates
        .par_iter()
        .map(|path| scan_file(root, path, domain_tag))
        .collect();

    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for outcome in scanned {
        match outcome {
            Ok(r) => records.push(r),
            Err(s) => {
                log::warn!("skipping {}: {}", s.path.display(), s.reason);
                skipped.push(s);
            }
        }
    }
    if records.is_empty() {
        return Err(CorpusError::EmptyCorpus(root.to_path_buf()));
    }

    let name = root
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "corpus".to_owned());
    let mut manifest = DatasetManifest::new(
        name.clone(),
        format!("ingested {} images from `{name}` as {domain_tag}", records.len()),
    );
    manifest.records = records;
    Ok(Ingested {
        manifest,
        skipped,
        non_image_count,
    })
}

fn scan_file(root: &Path, path: &Path, domain_tag: DomainTag) -> Result<ImageRecord, SkippedFile> {
    let skip = |reason: String| SkippedFile {
        path: path.to_path_buf(),
        reason,
    };
    let bytes = fs::read(path).map_err(|e| skip(e.to_string()))?;
    let decoded = image::load_from_memory(&bytes).map_err(|e| skip(e.to_string()))?;
    if decoded.width() == 0 || decoded.height() == 0 {
        return Err(skip("zero-sized image".to_owned()));
    }
    let relative = relative_key(root, path);
    Ok(ImageRecord::from_bytes(
        domain_tag,
        path.to_path_buf(),
        &relative,
        &bytes,
        decoded.width(),
        decoded.height(),
    ))
}

fn relative_key(root: &Path, path: &Path) -> String {
    let rel = path.strip_prefix(root).unwrap_or(path);
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

#[derive(Serialize, Deserialize)]
struct ManifestHeader {
    schema_version: u32,
    name: String,
    created_at: DateTime<Utc>,
    provenance_note: String,
    record_count: usize,
    pair_count: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ManifestLine {
    Record(ImageRecord),
    Pair(Pair),
}

/// Serializes a manifest to its line-delimited JSON form.
pub fn write_manifest<W: Write>(manifest: &DatasetManifest, mut out: W) -> std::io::Result<()> {
    let header = ManifestHeader {
        schema_version: MANIFEST_SCHEMA_VERSION,
        name: manifest.name.clone(),
        created_at: manifest.created_at,
        provenance_note: manifest.provenance_note.clone(),
        record_count: manifest.records.len(),
        pair_count: manifest.pairs.len(),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for r in &manifest.records {
        serde_json::to_writer(&mut out, &ManifestLine::Record(r.clone()))?;
        out.write_all(b"\n")?;
    }
    for p in &manifest.pairs {
        serde_json::to_writer(&mut out, &ManifestLine::Pair(p.clone()))?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<(), CorpusError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CorpusError::io(parent, e))?;
    }
    let tmp = path.with_extension("tmp");
    let file = fs::File::create(&tmp).map_err(|e| CorpusError::io(&tmp, e))?;
    write_manifest(manifest, BufWriter::new(file)).map_err(|e| CorpusError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CorpusError::io(path, e))
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest, CorpusError> {
    let file = match fs::File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(CorpusError::NotFound(path.to_path_buf()))
        }
        Err(e) => return Err(CorpusError::io(path, e)),
    };
    read_manifest(BufReader::new(file), path)
}

pub fn read_manifest<R: BufRead>(reader: R, path: &Path) -> Result<DatasetManifest, CorpusError> {
    let incompatible = |reason: String| CorpusError::IncompatibleManifest {
        path: path.to_path_buf(),
        reason,
    };
    let mut lines = reader.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| incompatible("missing header".to_owned()))?
        .map_err(|e| CorpusError::io(path, e))?;
    let header: ManifestHeader = serde_json::from_str(&header_line)
        .map_err(|e| incompatible(format!("bad header: {e}")))?;
    if header.schema_version != MANIFEST_SCHEMA_VERSION {
        return Err(incompatible(format!(
            "schema_version {} (expected {MANIFEST_SCHEMA_VERSION})",
            header.schema_version
        )));
    }

    let mut manifest = DatasetManifest {
        name: header.name,
        records: Vec::with_capacity(header.record_count),
        pairs: Vec::with_capacity(header.pair_count),
        created_at: header.created_at,
        provenance_note: header.provenance_note,
    };
    for (lineno, line) in lines.enumerate() {
        let line = line.map_err(|e| CorpusError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<ManifestLine>(&line)
            .map_err(|e| incompatible(format!("line {}: {e}", lineno + 2)))?
        {
            ManifestLine::Record(r) => manifest.records.push(r),
            ManifestLine::Pair(p) => manifest.pairs.push(p),
        }
    }
    if manifest.records.len() != header.record_count || manifest.pairs.len() != header.pair_count {
        return Err(incompatible(format!(
            "expected {} records and {} pairs, found {} and {}",
            header.record_count,
            header.pair_count,
            manifest.records.len(),
            manifest.pairs.len()
        )));
    }
    Ok(manifest)
}
