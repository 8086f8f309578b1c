//! Procedural test material: shape images, their colour inversions,
//! paired painting/pseudo-real cases for the refiner, and small on-disk
//! corpora for exercising the whole pipeline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use std::fs;
use std::path::{Path, PathBuf};

use crate::corpus::{ingest_directory, save_manifest, CorpusError, DomainTag};
use crate::imaging::Image;
use crate::pipeline::{MeshSettings, PipelineConfig};
use crate::translation::{Architecture, TrainConfig};

/// Colours stay inside `[LOW, HIGH]` so inversion never saturates.
const LOW: f64 = 0.1;
const HIGH: f64 = 0.9;

fn random_colour(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [
        rng.random_range(LOW..HIGH),
        rng.random_range(LOW..HIGH),
        rng.random_range(LOW..HIGH),
    ]
}

/// A background with 1-3 filled discs and rectangles.
pub fn shape_image(size: usize, rng: &mut ChaCha8Rng) -> Image {
    let background = random_colour(rng);
    let mut img = Image::filled(size, size, background);
    let shapes = rng.random_range(1..=3);
    let s = size as f64;
    for _ in 0..shapes {
        let colour = random_colour(rng);
        let cx = rng.random_range(0.2 * s..0.8 * s);
        let cy = rng.random_range(0.2 * s..0.8 * s);
        let r = rng.random_range(0.12 * s..0.3 * s);
        let disc = rng.random_bool(0.5);
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let inside = if disc {
                    dx * dx + dy * dy <= r * r
                } else {
                    dx.abs() <= r && dy.abs() <= 0.7 * r
                };
                if inside {
                    for (c, v) in colour.iter().enumerate() {
                        img.set(c, y, x, *v);
                    }
                }
            }
        }
    }
    img
}

pub fn invert(img: &Image) -> Image {
    let data = img.data().iter().map(|v| 1.0 - v).collect();
    Image::from_planar(img.width(), img.height(), data)
}

/// Unpaired two-domain set: `count` shape images and `count` inverted shape
/// images drawn independently.
pub fn two_domain_set(count: usize, size: usize, seed: u64) -> (Vec<Image>, Vec<Image>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shapes = (0..count).map(|_| shape_image(size, &mut rng)).collect();
    let inverted = (0..count).map(|_| invert(&shape_image(size, &mut rng))).collect();
    (shapes, inverted)
}

/// Grey-ink "painting": dark strokes on a pale paper tone.
pub fn ink_painting(size: usize, rng: &mut ChaCha8Rng) -> Image {
    let shapes = shape_image(size, rng);
    let luma = shapes.luma();
    let paper = [0.92, 0.88, 0.80];
    Image::from_fn(size, size, |c, y, x| {
        let ink = luma[y * size + x];
        paper[c] * (0.35 + 0.65 * ink)
    })
}

/// A photographic-looking rendition of `painting` with the same layout:
/// tinted by height in the frame and lightly perturbed.
pub fn pseudo_photo(painting: &Image, rng: &mut ChaCha8Rng) -> Image {
    let (w, h) = painting.dims();
    let sky = [0.55, 0.70, 0.95];
    let ground = [0.30, 0.55, 0.25];
    let luma = painting.luma();
    let jitter: Vec<f64> = (0..w * h).map(|_| rng.random_range(-0.04..0.04)).collect();
    Image::from_fn(w, h, |c, y, x| {
        let t = y as f64 / (h.max(2) - 1) as f64;
        let tint = sky[c] * (1.0 - t) + ground[c] * t;
        (tint * (0.3 + 0.9 * luma[y * w + x]) + jitter[y * w + x]).clamp(0.0, 1.0)
    })
}

/// Uniform noise in `[0, 1)`.
pub fn noise_image(width: usize, height: usize, rng: &mut ChaCha8Rng) -> Image {
    let data = (0..3 * width * height).map(|_| rng.random::<f64>()).collect();
    Image::from_planar(width, height, data)
}

/// Paths of a corpus written by [`write_toy_corpus`].
#[derive(Debug, Clone)]
pub struct ToyCorpus {
    pub paintings_dir: PathBuf,
    pub photos_dir: PathBuf,
    pub paintings_manifest: PathBuf,
    pub photos_manifest: PathBuf,
}

/// Writes `paintings` ink paintings and `photos` pseudo-photos as PNGs under
/// `root`, ingests both directories and saves their manifests.
pub fn write_toy_corpus(
    root: &Path,
    paintings: usize,
    photos: usize,
    size: usize,
    seed: u64,
) -> Result<ToyCorpus, CorpusError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let paintings_dir = root.join("paintings");
    let photos_dir = root.join("photos");
    for dir in [&paintings_dir, &photos_dir] {
        fs::create_dir_all(dir).map_err(|e| CorpusError::Io {
            path: dir.clone(),
            source: e,
        })?;
    }
    let save = |img: &Image, path: PathBuf| {
        img.save_png(&path).map_err(|e| CorpusError::Invalid(e.to_string()))
    };
    for i in 0..paintings {
        save(&ink_painting(size, &mut rng), paintings_dir.join(format!("painting_{i:03}.png")))?;
    }
    for i in 0..photos {
        let base = ink_painting(size, &mut rng);
        save(&pseudo_photo(&base, &mut rng), photos_dir.join(format!("photo_{i:03}.png")))?;
    }
    let corpus = ToyCorpus {
        paintings_manifest: root.join("paintings.jsonl"),
        photos_manifest: root.join("photos.jsonl"),
        paintings_dir,
        photos_dir,
    };
    let p = ingest_directory(&corpus.paintings_dir, DomainTag::Painting)?;
    save_manifest(&p.manifest, &corpus.paintings_manifest)?;
    let q = ingest_directory(&corpus.photos_dir, DomainTag::Photo)?;
    save_manifest(&q.manifest, &corpus.photos_manifest)?;
    Ok(corpus)
}

/// A pipeline configuration over a toy corpus that finishes in seconds:
/// two training steps on 16×16 images with narrow networks, five refiner
/// steps and 2×2-pixel relief meshes.
pub fn quick_pipeline_config(corpus: &ToyCorpus, k: usize, output_root: PathBuf) -> PipelineConfig {
    let mut config = PipelineConfig::new(
        corpus.paintings_manifest.clone(),
        corpus.photos_manifest.clone(),
        k,
        output_root,
    );
    config.train = TrainConfig {
        iterations: 2,
        image_size: 16,
        checkpoint_every: 1,
        architecture: Architecture {
            gen_hidden: 4,
            gen_depth: 1,
            disc_hidden: 4,
            disc_downsamplings: 1,
            ..Architecture::default()
        },
        ..TrainConfig::default()
    };
    config.refine.steps = 5;
    config.depth.mesh = Some(MeshSettings::default());
    config.workers = 2;
    config
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inversion_is_an_involution() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = shape_image(16, &mut rng);
        let back = invert(&invert(&img));
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn two_domain_set_is_deterministic_and_in_range() {
        let (a, b) = two_domain_set(4, 12, 3);
        let (c, d) = two_domain_set(4, 12, 3);
        assert_eq!(a, c);
        assert_eq!(b, d);
        for img in a.iter().chain(&b) {
            assert!(img.data().iter().all(|v| (LOW..=HIGH).contains(v)));
        }
    }
}
