//! Second translation step: refine a (painting, pseudo-real) pair into the
//! final real-scene image, plus the structural similarity score used to
//! check that the painting's layout survived.
//!
//! The painting is the *content* (structure source) and the pseudo-real
//! image is the *reference* (appearance source).

use std::path::{Path, PathBuf};
use std::process::Command;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::corpus::{checksum_bytes, DomainTag, ImageRecord};
use crate::imaging::{Image, ImagingError, LUMA_WEIGHTS};

pub const SSIM_WINDOW: usize = 8;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

pub const DEFAULT_STEPS: usize = 50;
pub const DEFAULT_STRENGTH: f64 = 0.6;

#[derive(Debug, Error)]
pub enum RefineError {
    #[error("refine backend `{backend}` unavailable: {diagnostics}")]
    BackendUnavailable { backend: String, diagnostics: String },
    #[error("image sizes differ: {a:?} vs {b:?}")]
    ShapeError { a: (usize, usize), b: (usize, usize) },
    #[error("image {width}x{height} is smaller than one {SSIM_WINDOW}x{SSIM_WINDOW} window")]
    WindowError { width: usize, height: usize },
    #[error("invalid refine request: {0}")]
    InvalidRequest(String),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone)]
pub struct RefineRequest {
    /// The painting.
    pub content: Image,
    /// The pseudo-real image.
    pub reference: Image,
    pub steps: usize,
    /// Fraction of the noise schedule applied to the reference, in `[0, 1]`.
    pub strength: f64,
    pub seed: u64,
}

impl RefineRequest {
    pub fn new(content: Image, reference: Image, seed: u64) -> Self {
        Self {
            content,
            reference,
            steps: DEFAULT_STEPS,
            strength: DEFAULT_STRENGTH,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), RefineError> {
        if self.content.dims() != self.reference.dims() {
            return Err(RefineError::ShapeError {
                a: self.content.dims(),
                b: self.reference.dims(),
            });
        }
        if self.steps == 0 {
            return Err(RefineError::InvalidRequest("steps must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.strength) {
            return Err(RefineError::InvalidRequest(format!(
                "strength {} outside [0, 1]",
                self.strength
            )));
        }
        Ok(())
    }
}

/// How a backend may be used from several workers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendConcurrency {
    /// One instance may be shared; calls are independent or internally locked.
    Shared,
    /// Each worker needs its own instance.
    PerWorker,
}

pub trait RefineBackend: Send + Sync {
    /// Identifier recorded with every result, including the version.
    fn id(&self) -> String;
    fn concurrency(&self) -> BackendConcurrency;
    /// Produces the refined image; must keep the input dimensions.
    fn refine(&self, request: &RefineRequest) -> Result<Image, RefineError>;
}

/// In-memory refinement output.
#[derive(Debug, Clone)]
pub struct Refined {
    pub image: Image,
    pub structure_score: f64,
    pub backend_id: String,
}

#[derive(Debug, Clone)]
pub struct RefineResult {
    pub real_scene: ImageRecord,
    pub structure_score: f64,
    pub backend_id: String,
}

/// Runs the backend and scores the output against the content image.
pub fn refine_image(request: &RefineRequest, backend: &dyn RefineBackend) -> Result<Refined, RefineError> {
    request.validate()?;
    let image = backend.refine(request)?;
    if image.dims() != request.content.dims() {
        return Err(RefineError::ShapeError {
            a: request.content.dims(),
            b: image.dims(),
        });
    }
    let structure_score = structure_score(&image, &request.content)?;
    Ok(Refined {
        image,
        structure_score,
        backend_id: backend.id(),
    })
}

/// [`refine_image`], writing the result as `<out_dir>/<id>.png`.
pub fn refine(
    request: &RefineRequest,
    backend: &dyn RefineBackend,
    id: &str,
    out_dir: &Path,
) -> Result<RefineResult, RefineError> {
    let refined = refine_image(request, backend)?;
    std::fs::create_dir_all(out_dir).map_err(|e| RefineError::Io {
        path: out_dir.to_path_buf(),
        source: e,
    })?;
    let path = out_dir.join(format!("{id}.png"));
    refined.image.save_png(&path)?;
    let bytes = std::fs::read(&path).map_err(|e| RefineError::Io {
        path: path.clone(),
        source: e,
    })?;
    Ok(RefineResult {
        real_scene: ImageRecord {
            id: id.to_owned(),
            domain_tag: DomainTag::RealScene,
            path,
            width: refined.image.width() as u32,
            height: refined.image.height() as u32,
            checksum: checksum_bytes(&bytes),
        },
        structure_score: refined.structure_score,
        backend_id: refined.backend_id,
    })
}

/// Mean SSIM over every 8×8 window (stride 1) of the BT.601 luma planes,
/// with `C1 = 0.01²`, `C2 = 0.03²` for a unit dynamic range and population
/// (co)variances.
pub fn structure_score(a: &Image, b: &Image) -> Result<f64, RefineError> {
    if a.dims() != b.dims() {
        return Err(RefineError::ShapeError {
            a: a.dims(),
            b: b.dims(),
        });
    }
    let (w, h) = a.dims();
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(RefineError::WindowError { width: w, height: h });
    }
    let (la, lb) = (a.luma(), b.luma());
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut windows = 0usize;
    for y0 in 0..=h - SSIM_WINDOW {
        for x0 in 0..=w - SSIM_WINDOW {
            let (mut sa, mut sb) = (0.0, 0.0);
            for y in y0..y0 + SSIM_WINDOW {
                for x in x0..x0 + SSIM_WINDOW {
                    sa += la[y * w + x];
                    sb += lb[y * w + x];
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let (mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0);
            for y in y0..y0 + SSIM_WINDOW {
                for x in x0..x0 + SSIM_WINDOW {
                    let (p, q) = (la[y * w + x] - ma, lb[y * w + x] - mb);
                    saa += p * p;
                    sbb += q * q;
                    sab += p * q;
                }
            }
            let (va, vb, cov) = (saa / n, sbb / n, sab / n);
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            windows += 1;
        }
    }
    Ok(total / windows as f64)
}

/// Desk-scale stand-in for a pretrained diffusion translator.
///
/// The reference is pushed to timestep `strength * T` of a scaled-linear
/// noise schedule and then walked back with deterministic DDIM updates. At
/// each step a 3×3 linear denoiser, least-squares fitted on freshly noised
/// copies of the reference at that noise level, predicts the clean image;
/// the prediction is then pulled toward the content image's Sobel edge map
/// with a weight that vanishes as the noise level does.
#[derive(Debug, Clone)]
pub struct StubRefiner {
    pub train_timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Edge-guidance step size at full noise.
    pub guidance: f64,
    pub guidance_iterations: usize,
    /// Pixels sampled per denoiser fit.
    pub fit_samples: usize,
}

impl Default for StubRefiner {
    fn default() -> Self {
        Self {
            train_timesteps: 1000,
            beta_start: 0.00085,
            beta_end: 0.012,
            guidance: 1.0,
            guidance_iterations: 5,
            fit_samples: 2048,
        }
    }
}

pub const STUB_REFINER_VERSION: &str = "stub-ddim-1";

impl StubRefiner {
    fn alphas_cumprod(&self) -> Vec<f64> {
        let t = self.train_timesteps;
        let (s, e) = (self.beta_start.sqrt(), self.beta_end.sqrt());
        let mut acc = 1.0;
        (0..t)
            .map(|i| {
                let frac = if t > 1 { i as f64 / (t - 1) as f64 } else { 0.0 };
                let beta = (s + (e - s) * frac).powi(2);
                acc *= 1.0 - beta;
                acc
            })
            .collect()
    }
}

impl RefineBackend for StubRefiner {
    fn id(&self) -> String {
        STUB_REFINER_VERSION.to_owned()
    }

    fn concurrency(&self) -> BackendConcurrency {
        BackendConcurrency::Shared
    }

    fn refine(&self, request: &RefineRequest) -> Result<Image, RefineError> {
        request.validate()?;
        let t_start = ((request.strength * self.train_timesteps as f64).round() as usize)
            .min(self.train_timesteps - 1);
        if t_start == 0 {
            return Ok(request.reference.clone());
        }
        let alphas = self.alphas_cumprod();
        let (w, h) = request.reference.dims();
        let reference = request.reference.data();
        let content_edges = sobel_luma(&request.content.luma(), w, h);
        let mut rng = ChaCha8Rng::seed_from_u64(request.seed);

        let a0 = alphas[t_start];
        let mut x: Vec<f64> = reference
            .iter()
            .map(|&r| a0.sqrt() * r + (1.0 - a0).sqrt() * rng.sample::<f64, _>(StandardNormal))
            .collect();

        let steps = request.steps.min(t_start);
        let schedule: Vec<usize> = (0..=steps).map(|i| t_start * (steps - i) / steps).collect();
        let mut x0 = x.clone();
        for (i, pair) in schedule.windows(2).enumerate() {
            let t = pair[0];
            let at = alphas[t];
            let at_prev = if i + 1 == steps { 1.0 } else { alphas[pair[1]] };
            let sigma = ((1.0 - at) / at).sqrt();
            let scaled: Vec<f64> = x.iter().map(|v| v / at.sqrt()).collect();
            let weights = fit_denoiser(reference, w, h, sigma, self.fit_samples, &mut rng);
            x0 = apply_denoiser(&weights, &scaled, w, h);
            let eta = self.guidance * (1.0 - at);
            for _ in 0..self.guidance_iterations {
                edge_guidance_step(&mut x0, &content_edges, w, h, eta);
            }
            for (xv, &x0v) in x.iter_mut().zip(&x0) {
                let eps = (*xv - at.sqrt() * x0v) / (1.0 - at).sqrt();
                *xv = at_prev.sqrt() * x0v + (1.0 - at_prev).sqrt() * eps;
            }
        }
        Ok(Image::from_planar(w, h, x0).clamp01())
    }
}

const TAPS: usize = 9;

fn neighbourhood(plane: &[f64], w: usize, h: usize, y: usize, x: usize) -> [f64; TAPS] {
    let mut out = [0.0; TAPS];
    let mut k = 0;
    for dy in -1i64..=1 {
        for dx in -1i64..=1 {
            let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
            let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
            out[k] = plane[yy * w + xx];
            k += 1;
        }
    }
    out
}

/// Ridge-regularized least squares for `clean ≈ taps · neighbourhood(noisy) + bias`.
fn fit_denoiser(
    clean: &[f64],
    w: usize,
    h: usize,
    sigma: f64,
    samples: usize,
    rng: &mut ChaCha8Rng,
) -> [f64; TAPS + 1] {
    let noisy: Vec<f64> = clean
        .iter()
        .map(|&v| v + sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let plane = w * h;
    let dim = TAPS + 1;
    let mut xtx = DMatrix::<f64>::zeros(dim, dim);
    let mut xty = DVector::<f64>::zeros(dim);
    for _ in 0..samples {
        let c = rng.random_range(0..3);
        let y = rng.random_range(0..h);
        let x = rng.random_range(0..w);
        let taps = neighbourhood(&noisy[c * plane..(c + 1) * plane], w, h, y, x);
        let mut row = [1.0; TAPS + 1];
        row[..TAPS].copy_from_slice(&taps);
        let target = clean[c * plane + y * w + x];
        for i in 0..dim {
            xty[i] += row[i] * target;
            for j in 0..dim {
                xtx[(i, j)] += row[i] * row[j];
            }
        }
    }
    for i in 0..dim {
        xtx[(i, i)] += 1e-6 * samples as f64;
    }
    let solution = xtx
        .cholesky()
        .map(|c| c.solve(&xty))
        .unwrap_or_else(|| {
            let mut identity = DVector::zeros(dim);
            identity[TAPS / 2] = 1.0;
            identity
        });
    let mut out = [0.0; TAPS + 1];
    out.copy_from_slice(solution.as_slice());
    out
}

fn apply_denoiser(weights: &[f64; TAPS + 1], data: &[f64], w: usize, h: usize) -> Vec<f64> {
    let plane = w * h;
    let mut out = Vec::with_capacity(data.len());
    for c in 0..3 {
        let p = &data[c * plane..(c + 1) * plane];
        for y in 0..h {
            for x in 0..w {
                let taps = neighbourhood(p, w, h, y, x);
                let v: f64 = taps.iter().zip(weights).map(|(a, b)| a * b).sum::<f64>() + weights[TAPS];
                out.push(v);
            }
        }
    }
    out
}

/// Sobel responses (scaled by 1/8) on interior pixels; border entries are 0.
fn sobel_luma(luma: &[f64], w: usize, h: usize) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let p = |dy: i64, dx: i64| luma[(y as i64 + dy) as usize * w + (x as i64 + dx) as usize];
            gx[y * w + x] = (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1) - p(-1, -1) - 2.0 * p(0, -1) - p(1, -1)) / 8.0;
            gy[y * w + x] = (p(1, -1) + 2.0 * p(1, 0) + p(1, 1) - p(-1, -1) - 2.0 * p(-1, 0) - p(-1, 1)) / 8.0;
        }
    }
    (gx, gy)
}

/// One gradient step on `½‖S L(x) − S L(content)‖²` over both Sobel directions.
fn edge_guidance_step(x: &mut [f64], target: &(Vec<f64>, Vec<f64>), w: usize, h: usize, eta: f64) {
    let plane = w * h;
    let luma: Vec<f64> = (0..plane)
        .map(|i| (0..3).map(|c| LUMA_WEIGHTS[c] * x[c * plane + i]).sum())
        .collect();
    let (gx, gy) = sobel_luma(&luma, w, h);
    let mut grad = vec![0.0; plane];
    for y in 1..h.saturating_sub(1) {
        for xx in 1..w.saturating_sub(1) {
            let i = y * w + xx;
            let rx = (gx[i] - target.0[i]) / 8.0;
            let ry = (gy[i] - target.1[i]) / 8.0;
            let mut add = |dy: i64, dx: i64, v: f64| {
                grad[(y as i64 + dy) as usize * w + (xx as i64 + dx) as usize] += v;
            };
            add(-1, 1, rx);
            add(0, 1, 2.0 * rx);
            add(1, 1, rx);
            add(-1, -1, -rx - ry);
            add(0, -1, -2.0 * rx);
            add(1, -1, -rx + ry);
            add(1, 0, 2.0 * ry);
            add(1, 1, ry);
            add(-1, 0, -2.0 * ry);
            add(-1, 1, -ry);
        }
    }
    for c in 0..3 {
        for i in 0..plane {
            x[c * plane + i] -= eta * LUMA_WEIGHTS[c] * grad[i];
        }
    }
}

/// Adapter for an external refinement program.
///
/// Invoked as `program [args..] <content.png> <reference.png> <out.png> <seed>`;
/// a zero exit status means `<out.png>` holds the result.
#[derive(Debug, Clone)]
pub struct CommandRefiner {
    pub program: PathBuf,
    pub args: Vec<String>,
    pub version: String,
}

impl RefineBackend for CommandRefiner {
    fn id(&self) -> String {
        format!("command:{}@{}", self.program.display(), self.version)
    }

    fn concurrency(&self) -> BackendConcurrency {
        BackendConcurrency::Shared
    }

    fn refine(&self, request: &RefineRequest) -> Result<Image, RefineError> {
        let unavailable = |diagnostics: String| RefineError::BackendUnavailable {
            backend: self.program.display().to_string(),
            diagnostics,
        };
        let dir = tempfile::tempdir().map_err(|e| unavailable(e.to_string()))?;
        let content = dir.path().join("content.png");
        let reference = dir.path().join("reference.png");
        let out = dir.path().join("out.png");
        request.content.save_png(&content)?;
        request.reference.save_png(&reference)?;
        let output = Command::new(&self.program)
            .args(&self.args)
            .arg(&content)
            .arg(&reference)
            .arg(&out)
            .arg(request.seed.to_string())
            .output()
            .map_err(|e| unavailable(e.to_string()))?;
        if !output.status.success() {
            return Err(unavailable(format!(
                "{}: {}",
                output.status,
                String::from_utf8_lossy(&output.stderr).trim()
            )));
        }
        Ok(Image::open(&out)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy;

    fn pattern(seed: u64, size: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        toy::noise_image(size, size, &mut rng)
    }

    #[test]
    fn identical_images_score_one() {
        let a = pattern(1, 12);
        assert!((structure_score(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn score_is_symmetric() {
        let (a, b) = (pattern(1, 10), pattern(2, 10));
        assert_eq!(structure_score(&a, &b).unwrap(), structure_score(&b, &a).unwrap());
    }

    #[test]
    fn negation_scores_below_zero() {
        let a = pattern(3, 16);
        let neg = toy::invert(&a);
        assert!(structure_score(&a, &neg).unwrap() < 0.0);
    }

    #[test]
    fn small_or_mismatched_inputs_are_rejected() {
        let small = pattern(0, 7);
        assert!(matches!(structure_score(&small, &small), Err(RefineError::WindowError { .. })));
        let (a, b) = (pattern(0, 8), pattern(0, 9));
        assert!(matches!(structure_score(&a, &b), Err(RefineError::ShapeError { .. })));
    }

    #[test]
    fn zero_strength_returns_the_reference() {
        let req = RefineRequest {
            strength: 0.0,
            ..RefineRequest::new(pattern(0, 16), pattern(1, 16), 5)
        };
        let refined = refine_image(&req, &StubRefiner::default()).unwrap();
        assert_eq!(refined.image, req.reference);
        let expected = structure_score(&req.reference, &req.content).unwrap();
        assert_eq!(refined.structure_score, expected);
    }

    #[test]
    fn refinement_is_deterministic_and_keeps_size() {
        let req = RefineRequest {
            steps: 1,
            ..RefineRequest::new(pattern(0, 12), pattern(1, 12), 9)
        };
        let stub = StubRefiner::default();
        let a = stub.refine(&req).unwrap();
        let b = stub.refine(&req).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dims(), (12, 12));
    }

    #[test]
    fn mismatched_request_is_a_shape_error() {
        let req = RefineRequest::new(pattern(0, 12), pattern(1, 10), 0);
        assert!(matches!(
            refine_image(&req, &StubRefiner::default()),
            Err(RefineError::ShapeError { .. })
        ));
    }

    #[test]
    fn edge_guidance_reduces_edge_residual() {
        let (w, h) = (12, 12);
        let content = pattern(4, 12);
        let target = sobel_luma(&content.luma(), w, h);
        let mut x = pattern(5, 12).into_data();
        let residual = |x: &[f64]| {
            let img = Image::from_planar(w, h, x.to_vec());
            let (gx, gy) = sobel_luma(&img.luma(), w, h);
            gx.iter()
                .zip(&target.0)
                .chain(gy.iter().zip(&target.1))
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
        };
        let before = residual(&x);
        for _ in 0..10 {
            edge_guidance_step(&mut x, &target, w, h, 1.0);
        }
        assert!(residual(&x) < before);
    }

    #[test]
    fn missing_external_program_is_unavailable() {
        let backend = CommandRefiner {
            program: PathBuf::from("/nonexistent/refiner"),
            args: vec![],
            version: "0".into(),
        };
        let req = RefineRequest::new(pattern(0, 8), pattern(1, 8), 0);
        assert!(matches!(backend.refine(&req), Err(RefineError::BackendUnavailable { .. })));
    }
}
