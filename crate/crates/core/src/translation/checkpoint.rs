//! Run directory layout:
//!
//! ```text
//! run/
//!   losses.csv            step,adv_ori,adv_photo,cyc,total (append-only)
//!   {step}/gen_p2o        JSON network weights
//!   {step}/gen_o2p
//!   {step}/disc_ori
//!   {step}/disc_photo
//!   {step}/metadata.json  TrainConfig, step and input hashes
//! ```

use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{LossReport, TrainConfig, TranslationError, TranslatorPair};

pub const CHECKPOINT_FILES: [&str; 4] = ["gen_p2o", "gen_o2p", "disc_ori", "disc_photo"];
const METADATA_FILE: &str = "metadata.json";
const LOSS_FILE: &str = "losses.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMetadata {
    pub step: u64,
    pub config: TrainConfig,
    /// Hash of the dictionary the training pairs were matched with.
    pub dictionary_hash: Option<String>,
    /// Hash of the serialized matched manifest.
    pub manifest_hash: Option<String>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), TranslationError> {
    let body = serde_json::to_vec(value).map_err(|e| TranslationError::CheckpointFormat {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    fs::write(path, body).map_err(|e| TranslationError::io(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, TranslationError> {
    let bytes = fs::read(path).map_err(|e| TranslationError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| TranslationError::CheckpointFormat {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Writes `run_root/{step}/`. The directory is assembled under a temporary
/// name and renamed into place, so a crash never leaves a partial checkpoint.
pub fn write_checkpoint(
    run_root: &Path,
    pair: &TranslatorPair,
    metadata: &CheckpointMetadata,
) -> Result<PathBuf, TranslationError> {
    let final_dir = run_root.join(metadata.step.to_string());
    let tmp_dir = run_root.join(format!(".{}.partial", metadata.step));
    if tmp_dir.exists() {
        fs::remove_dir_all(&tmp_dir).map_err(|e| TranslationError::io(&tmp_dir, e))?;
    }
    fs::create_dir_all(&tmp_dir).map_err(|e| TranslationError::io(&tmp_dir, e))?;
    write_json(&tmp_dir.join("gen_p2o"), &pair.gen_photo_to_ori)?;
    write_json(&tmp_dir.join("gen_o2p"), &pair.gen_ori_to_photo)?;
    write_json(&tmp_dir.join("disc_ori"), &pair.disc_ori)?;
    write_json(&tmp_dir.join("disc_photo"), &pair.disc_photo)?;
    write_json(&tmp_dir.join(METADATA_FILE), metadata)?;
    if final_dir.exists() {
        fs::remove_dir_all(&final_dir).map_err(|e| TranslationError::io(&final_dir, e))?;
    }
    fs::rename(&tmp_dir, &final_dir).map_err(|e| TranslationError::io(&final_dir, e))?;
    Ok(final_dir)
}

pub fn load_checkpoint(dir: &Path) -> Result<(TranslatorPair, CheckpointMetadata), TranslationError> {
    if !dir.join(METADATA_FILE).is_file() {
        return Err(TranslationError::NoCheckpoint(dir.to_path_buf()));
    }
    let metadata: CheckpointMetadata = read_json(&dir.join(METADATA_FILE))?;
    let pair = TranslatorPair {
        gen_photo_to_ori: read_json(&dir.join("gen_p2o"))?,
        gen_ori_to_photo: read_json(&dir.join("gen_o2p"))?,
        disc_ori: read_json(&dir.join("disc_ori"))?,
        disc_photo: read_json(&dir.join("disc_photo"))?,
        step: metadata.step,
    };
    Ok((pair, metadata))
}

/// The highest-numbered checkpoint under `run_root`, or `run_root` itself
/// when it already is a checkpoint directory.
pub fn latest_checkpoint(run_root: &Path) -> Result<PathBuf, TranslationError> {
    if run_root.join(METADATA_FILE).is_file() {
        return Ok(run_root.to_path_buf());
    }
    let entries = fs::read_dir(run_root).map_err(|_| TranslationError::NoCheckpoint(run_root.to_path_buf()))?;
    entries
        .filter_map(Result::ok)
        .filter_map(|e| {
            let step: u64 = e.file_name().to_str()?.parse().ok()?;
            e.path().join(METADATA_FILE).is_file().then(|| (step, e.path()))
        })
        .max_by_key(|(step, _)| *step)
        .map(|(_, p)| p)
        .ok_or_else(|| TranslationError::NoCheckpoint(run_root.to_path_buf()))
}

/// Append-only loss stream.
pub struct LossLog {
    path: PathBuf,
    writer: csv::Writer<fs::File>,
}

impl LossLog {
    pub fn open(run_root: &Path) -> Result<Self, TranslationError> {
        fs::create_dir_all(run_root).map_err(|e| TranslationError::io(run_root, e))?;
        let path = run_root.join(LOSS_FILE);
        let fresh = !path.exists() || fs::metadata(&path).map(|m| m.len() == 0).unwrap_or(true);
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| TranslationError::io(&path, e))?;
        let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        if fresh {
            writer
                .write_record(["step", "adv_ori", "adv_photo", "cyc", "total"])
                .map_err(|e| csv_error(&path, e))?;
        }
        Ok(Self { path, writer })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, r: &LossReport) -> Result<(), TranslationError> {
        self.writer
            .write_record([
                r.step.to_string(),
                r.adv_ori.to_string(),
                r.adv_photo.to_string(),
                r.cyc.to_string(),
                r.total.to_string(),
            ])
            .map_err(|e| csv_error(&self.path, e))?;
        self.writer.flush().map_err(|e| TranslationError::io(&self.path, e))
    }

    /// Parses a loss stream back into reports.
    pub fn read(path: &Path) -> Result<Vec<LossReport>, TranslationError> {
        let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
        reader
            .records()
            .map(|rec| {
                let rec = rec.map_err(|e| csv_error(path, e))?;
                let num = |i: usize| -> Result<f64, TranslationError> {
                    rec.get(i)
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| TranslationError::CheckpointFormat {
                            path: path.to_path_buf(),
                            message: format!("bad loss row {rec:?}"),
                        })
                };
                Ok(LossReport {
                    step: num(0)? as u64,
                    adv_ori: num(1)?,
                    adv_photo: num(2)?,
                    cyc: num(3)?,
                    total: num(4)?,
                })
            })
            .collect()
    }
}

fn csv_error(path: &Path, e: csv::Error) -> TranslationError {
    TranslationError::CheckpointFormat {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}
