//! Unpaired painting/photo translation with two generators and two
//! discriminators, trained on the matched dataset.

mod checkpoint;
mod loss;
mod nets;
mod train;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::corpus::{checksum_bytes, CorpusError, DomainTag, ImageRecord};
use crate::imaging::{Image, ImagingError};

pub use checkpoint::{
    latest_checkpoint, load_checkpoint, write_checkpoint, CheckpointMetadata, LossLog,
    CHECKPOINT_FILES,
};
pub use loss::{
    adversarial_loss, adversarial_loss_ori, adversarial_loss_photo, cycle_consistency_loss,
    total_loss, total_loss_with_gradient, AdversarialMode, Batches, LossReport,
};
pub use nets::{Architecture, Conv2d, Discriminator, Generator, GeneratorInit, TranslatorPair};
pub use train::{train, Adam, RunTarget, TrainOutcome, TrainingData};

#[derive(Debug, Error)]
pub enum TranslationError {
    #[error("batch is empty")]
    EmptyBatch,
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeError { expected: Vec<usize>, found: Vec<usize> },
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("training diverged at step {step} (last good checkpoint: {last_checkpoint:?})")]
    DivergedTraining {
        step: u64,
        last_checkpoint: Option<PathBuf>,
    },
    #[error("no checkpoint found under {0}")]
    NoCheckpoint(PathBuf),
    #[error("training data needs at least one image per domain")]
    MissingDomain,
    #[error("checkpoint {path}: {message}")]
    CheckpointFormat { path: PathBuf, message: String },
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl TranslationError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Optimization settings. Loss weights default to `lambda_adv = 1`,
/// `lambda_cyc = 10`; the remaining values are implementation defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda_adv: f64,
    pub lambda_cyc: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub iterations: u64,
    pub image_size: usize,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub adversarial: AdversarialMode,
    pub architecture: Architecture,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_adv: 1.0,
            lambda_cyc: 10.0,
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            batch_size: 1,
            iterations: 10_000,
            image_size: 256,
            seed: 0,
            checkpoint_every: 1_000,
            adversarial: AdversarialMode::Log,
            architecture: Architecture::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TranslationError> {
        let bad = |m: &str| Err(TranslationError::InvalidConfig(m.to_owned()));
        if !(self.lambda_adv >= 0.0 && self.lambda_adv.is_finite()) {
            return bad("lambda_adv must be finite and >= 0");
        }
        if !(self.lambda_cyc >= 0.0 && self.lambda_cyc.is_finite()) {
            return bad("lambda_cyc must be finite and >= 0");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.image_size < 8 {
            return bad("image_size must be at least 8");
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be positive");
        }
        let a = &self.architecture;
        if a.gen_hidden == 0 || a.disc_hidden == 0 {
            return bad("network widths must be positive");
        }
        Ok(())
    }
}

/// Stacks same-sized images into an `[n, 3, h, w]` batch.
pub fn images_to_batch(images: &[&Image]) -> Result<Tensor, TranslationError> {
    let first = images.first().ok_or(TranslationError::EmptyBatch)?;
    let (w, h) = first.dims();
    let mut data = Vec::with_capacity(images.len() * 3 * w * h);
    for img in images {
        if img.dims() != (w, h) {
            return Err(TranslationError::ShapeError {
                expected: vec![3, h, w],
                found: vec![3, img.height(), img.width()],
            });
        }
        data.extend_from_slice(img.data());
    }
    Ok(Tensor::new(vec![images.len(), 3, h, w], data))
}

pub fn batch_to_images(batch: &Tensor) -> Vec<Image> {
    let (n, c, h, w) = batch.dims4();
    assert_eq!(c, 3, "RGB batches only");
    batch
        .data
        .chunks(3 * h * w)
        .take(n)
        .map(|chunk| Image::from_planar(w, h, chunk.to_vec()))
        .collect()
}

/// Size that fits inside `max_side` while keeping the aspect ratio.
pub fn fit_within(width: usize, height: usize, max_side: usize) -> (usize, usize) {
    let long = width.max(height) as f64;
    let scale = max_side as f64 / long;
    let w = ((width as f64 * scale).round() as usize).max(1);
    let h = ((height as f64 * scale).round() as usize).max(1);
    (w, h)
}

/// Painting to pseudo-real photo with `gen_ori_to_photo`, after resizing the
/// painting to fit `image_size`.
pub fn translate_image(pair: &TranslatorPair, painting: &Image, image_size: usize) -> Image {
    let (w, h) = fit_within(painting.width(), painting.height(), image_size);
    let input = painting.resized(w, h);
    let batch = images_to_batch(&[&input]).expect("single image batch");
    let out = pair.gen_ori_to_photo.apply(batch);
    batch_to_images(&out).remove(0)
}

/// Translates one painting record and writes `<out_dir>/<id>.png`.
pub fn translate_to_pseudo_real(
    pair: &TranslatorPair,
    painting: &ImageRecord,
    image_size: usize,
    out_dir: &Path,
) -> Result<ImageRecord, TranslationError> {
    let image = Image::open(&painting.path)?;
    let translated = translate_image(pair, &image, image_size);
    let id = derived_id(&painting.id, DomainTag::PseudoReal);
    save_derived(&translated, &id, DomainTag::PseudoReal, out_dir)
}

/// Id of an artifact derived from a painting.
pub fn derived_id(painting_id: &str, tag: DomainTag) -> String {
    format!("{painting_id}.{tag}")
}

/// Writes `image` as `<dir>/<id>.png` and describes it as a record.
pub fn save_derived(
    image: &Image,
    id: &str,
    tag: DomainTag,
    dir: &Path,
) -> Result<ImageRecord, TranslationError> {
    std::fs::create_dir_all(dir).map_err(|e| TranslationError::io(dir, e))?;
    let path = dir.join(format!("{id}.png"));
    image.save_png(&path)?;
    let bytes = std::fs::read(&path).map_err(|e| TranslationError::io(&path, e))?;
    Ok(ImageRecord {
        id: id.to_owned(),
        domain_tag: tag,
        path,
        width: image.width() as u32,
        height: image.height() as u32,
        checksum: checksum_bytes(&bytes),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        assert_eq!((c.lambda_adv, c.lambda_cyc), (1.0, 10.0));
        assert_eq!(c.adversarial, AdversarialMode::Log);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for c in [
            TrainConfig { lambda_cyc: -1.0, ..Default::default() },
            TrainConfig { learning_rate: 0.0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { image_size: 4, ..Default::default() },
        ] {
            assert!(matches!(c.validate(), Err(TranslationError::InvalidConfig(_))));
        }
    }

    #[test]
    fn identity_generator_translates_to_the_resized_input() {
        let arch = Architecture {
            init: GeneratorInit::Identity,
            ..Architecture::default()
        };
        let pair = TranslatorPair::new(&arch, 0);
        let painting = Image::from_fn(20, 10, |c, y, x| ((c * 31 + y * 7 + x * 3) % 256) as f64 / 255.0);
        let out = translate_image(&pair, &painting, 16);
        assert_eq!(out.dims(), (16, 8));
        assert_eq!(out, painting.resized(16, 8));
    }

    #[test]
    fn fit_keeps_aspect() {
        assert_eq!(fit_within(512, 256, 256), (256, 128));
        assert_eq!(fit_within(100, 100, 32), (32, 32));
    }

    #[test]
    fn batch_roundtrip() {
        let a = Image::filled(3, 2, [0.1, 0.2, 0.3]);
        let b = Image::filled(3, 2, [0.4, 0.5, 0.6]);
        let batch = images_to_batch(&[&a, &b]).unwrap();
        assert_eq!(batch.shape, vec![2, 3, 2, 3]);
        assert_eq!(batch_to_images(&batch), vec![a.clone(), b]);
        let c = Image::filled(2, 2, [0.0; 3]);
        assert!(images_to_batch(&[&a, &c]).is_err());
        assert!(matches!(images_to_batch(&[]), Err(TranslationError::EmptyBatch)));
    }
}
