//! Joint text/image encoder backends and the content-addressed embedding cache.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Mutex, RwLock};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::MatchError;
use crate::imaging::Image;

/// Embedding dimension of the stub backends.
pub const STUB_EMBEDDING_DIM: usize = 64;
const NORM_TOLERANCE: f64 = 1e-6;

/// A unit-norm embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    /// L2-normalizes `values`. Fails on empty, zero or non-finite input.
    pub fn normalized(values: Vec<f64>) -> Result<Self, MatchError> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(MatchError::DegenerateEmbedding);
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(MatchError::DegenerateEmbedding);
        }
        Ok(Self(values.into_iter().map(|v| v / norm).collect()))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn is_unit(&self) -> bool {
        let norm = self.0.iter().map(|v| v * v).sum::<f64>().sqrt();
        (norm - 1.0).abs() <= NORM_TOLERANCE
    }
}

/// String to vector. Implementations must be deterministic.
pub trait TextEncoder: Send + Sync {
    fn version(&self) -> &str;
    fn encode_text(&self, text: &str) -> Result<Vec<f64>, MatchError>;
}

/// Image to vector, in the same space as the paired [`TextEncoder`].
pub trait ImageEncoder: Send + Sync {
    fn version(&self) -> &str;
    fn encode_image(&self, path: &Path, image: &Image) -> Result<Vec<f64>, MatchError>;
}

fn seeded_rng(label: &[u8]) -> ChaCha8Rng {
    let digest = Sha256::digest(label);
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}

/// Hash-seeded Gaussian vectors; identical text gives identical output.
#[derive(Debug, Clone)]
pub struct StubTextEncoder {
    dim: usize,
}

impl StubTextEncoder {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }
}

impl Default for StubTextEncoder {
    fn default() -> Self {
        Self::new(STUB_EMBEDDING_DIM)
    }
}

impl TextEncoder for StubTextEncoder {
    fn version(&self) -> &str {
        "stub-text-1"
    }

    fn encode_text(&self, text: &str) -> Result<Vec<f64>, MatchError> {
        let mut rng = seeded_rng(text.as_bytes());
        Ok((0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect())
    }
}

/// Pools an image into a coarse grid of colour and gradient statistics and
/// projects it through a fixed random matrix.
#[derive(Debug, Clone)]
pub struct StubImageEncoder {
    grid: usize,
    projection: Vec<Vec<f64>>,
}

impl StubImageEncoder {
    pub fn new(dim: usize) -> Self {
        let grid = 4;
        let features = grid * grid * 4;
        let mut rng = seeded_rng(b"stub-image-projection");
        let projection = (0..dim)
            .map(|_| (0..features).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        Self { grid, projection }
    }

    fn features(&self, image: &Image) -> Vec<f64> {
        let (w, h) = image.dims();
        let luma = image.luma();
        let mut out = Vec::with_capacity(self.grid * self.grid * 4);
        for gy in 0..self.grid {
            for gx in 0..self.grid {
                let (y0, y1) = (gy * h / self.grid, ((gy + 1) * h / self.grid).max(gy * h / self.grid + 1).min(h));
                let (x0, x1) = (gx * w / self.grid, ((gx + 1) * w / self.grid).max(gx * w / self.grid + 1).min(w));
                let count = ((y1 - y0) * (x1 - x0)) as f64;
                for c in 0..3 {
                    let mut sum = 0.0;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            sum += image.get(c, y, x);
                        }
                    }
                    out.push(sum / count - 0.5);
                }
                let mut grad = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        if x + 1 < w {
                            grad += (luma[y * w + x + 1] - luma[y * w + x]).abs();
                        }
                        if y + 1 < h {
                            grad += (luma[(y + 1) * w + x] - luma[y * w + x]).abs();
                        }
                    }
                }
                out.push(grad / count);
            }
        }
        out
    }
}

impl Default for StubImageEncoder {
    fn default() -> Self {
        Self::new(STUB_EMBEDDING_DIM)
    }
}

impl ImageEncoder for StubImageEncoder {
    fn version(&self) -> &str {
        "stub-image-1"
    }

    fn encode_image(&self, _path: &Path, image: &Image) -> Result<Vec<f64>, MatchError> {
        let f = self.features(image);
        Ok(self
            .projection
            .iter()
            .map(|row| row.iter().zip(&f).map(|(a, b)| a * b).sum())
            .collect())
    }
}

/// Adapter for an external joint embedding model.
///
/// The program is invoked as `program [args..] text <prompt>` or
/// `program [args..] image <path>` and must print a JSON array of numbers on
/// stdout and exit with status 0.
#[derive(Debug, Clone)]
pub struct CommandEncoder {
    pub program: PathBuf,
    pub args: Vec<String>,
    pub version: String,
}

impl CommandEncoder {
    fn run(&self, mode: &str, operand: &str) -> Result<Vec<f64>, MatchError> {
        let unavailable = |diagnostics: String| MatchError::EncoderUnavailable {
            backend: self.program.display().to_string(),
            diagnostics,
        };
        let output = Command::new(&self.program)
            .args(&self.args)
            .arg(mode)
            .arg(operand)
            .output()
            .map_err(|e| unavailable(e.to_string()))?;
        if !output.status.success() {
            return Err(unavailable(format!(
                "{}: {}",
                output.status,
                String::from_utf8_lossy(&output.stderr).trim()
            )));
        }
        serde_json::from_slice(&output.stdout)
            .map_err(|e| unavailable(format!("unparseable output: {e}")))
    }
}

impl TextEncoder for CommandEncoder {
    fn version(&self) -> &str {
        &self.version
    }

    fn encode_text(&self, text: &str) -> Result<Vec<f64>, MatchError> {
        self.run("text", text)
    }
}

impl ImageEncoder for CommandEncoder {
    fn version(&self) -> &str {
        &self.version
    }

    fn encode_image(&self, path: &Path, _image: &Image) -> Result<Vec<f64>, MatchError> {
        self.run("image", &path.to_string_lossy())
    }
}

/// Embeddings keyed by `(content checksum, encoder version)`.
///
/// Lookups take a shared lock; inserts are serialized and, with a disk root,
/// land via write-to-temp-then-rename so concurrent readers never observe a
/// partial file.
#[derive(Debug, Default)]
pub struct EmbeddingCache {
    root: Option<PathBuf>,
    memory: RwLock<HashMap<(String, String), EmbeddingVector>>,
    write_lock: Mutex<()>,
}

impl EmbeddingCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn on_disk(root: impl Into<PathBuf>) -> Self {
        Self {
            root: Some(root.into()),
            ..Self::default()
        }
    }

    /// Disk cache rooted at `$P2D_CACHE/embeddings`, falling back to memory
    /// when the variable is unset.
    pub fn from_env() -> Self {
        match std::env::var_os("P2D_CACHE") {
            Some(root) => Self::on_disk(PathBuf::from(root).join("embeddings")),
            None => Self::in_memory(),
        }
    }

    fn file_for(&self, checksum: &str, version: &str) -> Option<PathBuf> {
        let safe_version: String = version
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
            .collect();
        self.root
            .as_ref()
            .map(|r| r.join(safe_version).join(format!("{checksum}.json")))
    }

    pub fn get(&self, checksum: &str, version: &str) -> Option<EmbeddingVector> {
        let key = (checksum.to_owned(), version.to_owned());
        if let Some(v) = self.memory.read().expect("cache lock").get(&key) {
            return Some(v.clone());
        }
        let file = self.file_for(checksum, version)?;
        let bytes = fs::read(file).ok()?;
        let values: Vec<f64> = serde_json::from_slice(&bytes).ok()?;
        let v = EmbeddingVector(values);
        self.memory.write().expect("cache lock").insert(key, v.clone());
        Some(v)
    }

    pub fn put(&self, checksum: &str, version: &str, vector: &EmbeddingVector) -> Result<(), MatchError> {
        let _guard = self.write_lock.lock().expect("cache write lock");
        if let Some(file) = self.file_for(checksum, version) {
            let io = |path: &Path, e| MatchError::Io {
                path: path.to_path_buf(),
                source: e,
            };
            let dir = file.parent().expect("cache file has a parent");
            fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
            let tmp = file.with_extension("tmp");
            let body = serde_json::to_vec(vector.values()).expect("finite floats serialize");
            fs::write(&tmp, body).map_err(|e| io(&tmp, e))?;
            fs::rename(&tmp, &file).map_err(|e| io(&file, e))?;
        }
        self.memory
            .write()
            .expect("cache lock")
            .insert((checksum.to_owned(), version.to_owned()), vector.clone());
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_yields_unit_vectors() {
        let v = EmbeddingVector::normalized(vec![3.0, 4.0]).unwrap();
        assert_eq!(v.values(), &[0.6, 0.8]);
        assert!(v.is_unit());
        assert!(EmbeddingVector::normalized(vec![0.0, 0.0]).is_err());
        assert!(EmbeddingVector::normalized(vec![]).is_err());
    }

    #[test]
    fn stub_text_encoder_is_deterministic() {
        let enc = StubTextEncoder::default();
        let a = enc.encode_text("a photo of a pond").unwrap();
        assert_eq!(a, enc.encode_text("a photo of a pond").unwrap());
        assert_ne!(a, enc.encode_text("a photo of a peak").unwrap());
        assert_eq!(a.len(), STUB_EMBEDDING_DIM);
    }

    #[test]
    fn stub_image_encoder_distinguishes_content() {
        let enc = StubImageEncoder::default();
        let dark = Image::filled(8, 8, [0.1, 0.1, 0.1]);
        let light = Image::filled(8, 8, [0.9, 0.8, 0.7]);
        let p = Path::new("x");
        assert_ne!(enc.encode_image(p, &dark).unwrap(), enc.encode_image(p, &light).unwrap());
    }

    #[test]
    fn missing_command_is_unavailable() {
        let enc = CommandEncoder {
            program: PathBuf::from("/nonexistent/encoder"),
            args: vec![],
            version: "x".into(),
        };
        assert!(matches!(
            enc.encode_text("hi"),
            Err(MatchError::EncoderUnavailable { .. })
        ));
    }

    #[test]
    fn disk_cache_survives_a_new_instance() {
        let dir = tempfile::tempdir().unwrap();
        let v = EmbeddingVector::normalized(vec![1.0, 2.0, 2.0]).unwrap();
        EmbeddingCache::on_disk(dir.path()).put("abc", "enc/v1", &v).unwrap();
        let fresh = EmbeddingCache::on_disk(dir.path());
        assert_eq!(fresh.get("abc", "enc/v1"), Some(v));
        assert_eq!(fresh.get("abc", "enc/v2"), None);
    }
}
