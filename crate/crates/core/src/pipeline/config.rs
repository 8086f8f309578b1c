use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::depth::{CommandDepth, DepthBackend, LuminanceDepth};
use crate::matcher::{
    CommandEncoder, ImageEncoder, StubImageEncoder, StubTextEncoder, TextEncoder, DEFAULT_TEMPERATURE,
};
use crate::refine::{CommandRefiner, RefineBackend, StubRefiner, DEFAULT_STEPS, DEFAULT_STRENGTH};
use crate::translation::TrainConfig;

pub const CONFIG_VERSION: u32 = 1;

/// Either the built-in stub or an external program following the module's
/// command contract.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSpec {
    #[default]
    Stub,
    Command {
        program: PathBuf,
        #[serde(default)]
        args: Vec<String>,
        version: String,
    },
}

impl BackendSpec {
    pub fn text_encoder(&self) -> Box<dyn TextEncoder> {
        match self {
            BackendSpec::Stub => Box::new(StubTextEncoder::default()),
            BackendSpec::Command { program, args, version } => Box::new(CommandEncoder {
                program: program.clone(),
                args: args.clone(),
                version: version.clone(),
            }),
        }
    }

    pub fn image_encoder(&self) -> Box<dyn ImageEncoder> {
        match self {
            BackendSpec::Stub => Box::new(StubImageEncoder::default()),
            BackendSpec::Command { program, args, version } => Box::new(CommandEncoder {
                program: program.clone(),
                args: args.clone(),
                version: version.clone(),
            }),
        }
    }

    pub fn refiner(&self) -> Box<dyn RefineBackend> {
        match self {
            BackendSpec::Stub => Box::new(StubRefiner::default()),
            BackendSpec::Command { program, args, version } => Box::new(CommandRefiner {
                program: program.clone(),
                args: args.clone(),
                version: version.clone(),
            }),
        }
    }

    pub fn depth(&self) -> Box<dyn DepthBackend> {
        match self {
            BackendSpec::Stub => Box::new(LuminanceDepth),
            BackendSpec::Command { program, args, version } => Box::new(CommandDepth {
                program: program.clone(),
                args: args.clone(),
                version: version.clone(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineSettings {
    pub backend: BackendSpec,
    pub steps: usize,
    pub strength: f64,
}

impl Default for RefineSettings {
    fn default() -> Self {
        Self {
            backend: BackendSpec::Stub,
            steps: DEFAULT_STEPS,
            strength: DEFAULT_STRENGTH,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeshSettings {
    pub pitch_mm: f64,
    pub relief_height_mm: f64,
    pub base_thickness_mm: f64,
}

impl Default for MeshSettings {
    fn default() -> Self {
        Self {
            pitch_mm: 0.2,
            relief_height_mm: 8.0,
            base_thickness_mm: 2.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DepthSettings {
    pub backend: BackendSpec,
    /// When set, every depth map is also exported as a relief mesh.
    pub mesh: Option<MeshSettings>,
}

/// A full run, read from a single JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub config_version: u32,
    pub paintings_manifest: PathBuf,
    pub photos_manifest: PathBuf,
    /// Dictionary file; the built-in landscape dictionary when absent.
    #[serde(default)]
    pub dictionary: Option<PathBuf>,
    pub k: usize,
    #[serde(default)]
    pub encoder: BackendSpec,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub refine: RefineSettings,
    #[serde(default)]
    pub depth: DepthSettings,
    pub output_root: PathBuf,
    #[serde(default)]
    pub seed: u64,
    /// Worker threads for the per-painting stages.
    #[serde(default = "default_workers")]
    pub workers: usize,
}

fn default_temperature() -> f64 {
    DEFAULT_TEMPERATURE
}

fn default_workers() -> usize {
    4
}

impl PipelineConfig {
    pub fn new(paintings_manifest: PathBuf, photos_manifest: PathBuf, k: usize, output_root: PathBuf) -> Self {
        Self {
            config_version: CONFIG_VERSION,
            paintings_manifest,
            photos_manifest,
            dictionary: None,
            k,
            encoder: BackendSpec::Stub,
            temperature: DEFAULT_TEMPERATURE,
            train: TrainConfig::default(),
            refine: RefineSettings::default(),
            depth: DepthSettings::default(),
            output_root,
            seed: 0,
            workers: default_workers(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        std::fs::write(path, text).map_err(|e| PipelineError::io(path, e))
    }

    /// Checks everything that can be checked without doing work, including
    /// that every referenced input path exists.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.config_version != CONFIG_VERSION {
            return bad(format!(
                "config_version {} is not supported (expected {CONFIG_VERSION})",
                self.config_version
            ));
        }
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be positive".into());
        }
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        let mut paths = vec![
            ("paintings_manifest", &self.paintings_manifest),
            ("photos_manifest", &self.photos_manifest),
        ];
        if let Some(d) = &self.dictionary {
            paths.push(("dictionary", d));
        }
        for (field, path) in paths {
            if !path.exists() {
                return Err(PipelineError::MissingPath {
                    field,
                    path: path.clone(),
                });
            }
        }
        self.train
            .validate()
            .map_err(|e| PipelineError::Config(format!("train: {e}")))?;
        if self.refine.steps == 0 || !(0.0..=1.0).contains(&self.refine.strength) {
            return bad("refine needs steps >= 1 and strength in [0, 1]".into());
        }
        if let Some(m) = &self.depth.mesh {
            if [m.pitch_mm, m.relief_height_mm, m.base_thickness_mm]
                .iter()
                .any(|v| !(*v > 0.0 && v.is_finite()))
            {
                return bad("mesh pitch, height and base must be positive".into());
            }
        }
        Ok(())
    }

    /// Hash of the canonical JSON form.
    pub fn hash(&self) -> String {
        super::hash_parts(&[&serde_json::to_vec(self).expect("config serializes")])
    }
}
