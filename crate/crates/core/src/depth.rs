//! Relative depth estimation and fabrication export.
//!
//! Depth values are *relative inverse depth*: larger means nearer to the
//! camera. Exported PNGs and relief meshes keep that convention, so near
//! scene content becomes the raised part of a relief.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::Command;

use image::{ImageBuffer, Luma};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{Image, ImagingError};
use crate::refine::BackendConcurrency;

#[derive(Debug, Error)]
pub enum DepthError {
    #[error("depth backend `{backend}` unavailable: {diagnostics}")]
    BackendUnavailable { backend: String, diagnostics: String },
    #[error(transparent)]
    Decode(#[from] ImagingError),
    #[error("depth map contains non-finite values")]
    NonFinite,
    #[error("depth map must be normalized first")]
    NotNormalized,
    #[error("depth map {width}x{height} is too small for a mesh (need at least 2x2)")]
    TooSmall { width: usize, height: usize },
    #[error("invalid mesh parameter: {0}")]
    InvalidParameter(String),
    #[error("backend returned {got:?} for a {input:?} image; aspect ratio differs")]
    AspectMismatch { input: (usize, usize), got: (usize, usize) },
    #[error("depth png {path}: {message}")]
    Png { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DepthError + '_ {
    move |source| DepthError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Row-major `height × width` grid of relative inverse depth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub source_image_id: String,
    pub normalized: bool,
}

impl DepthMap {
    /// Unnormalized map. Panics if `values.len() != width * height`.
    pub fn new(width: usize, height: usize, values: Vec<f64>, source_image_id: impl Into<String>) -> Self {
        assert_eq!(values.len(), width * height, "depth grid size");
        Self {
            width,
            height,
            values,
            source_image_id: source_image_id.into(),
            normalized: false,
        }
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

pub trait DepthBackend: Send + Sync {
    fn id(&self) -> String;
    fn concurrency(&self) -> BackendConcurrency;
    /// Returns `(width, height, row-major values)` at the backend's native
    /// resolution.
    fn predict(&self, image: &Image) -> Result<(usize, usize, Vec<f64>), DepthError>;
}

/// Treats luminance as nearness.
#[derive(Debug, Clone, Copy, Default)]
pub struct LuminanceDepth;

pub const LUMINANCE_DEPTH_VERSION: &str = "stub-luminance-1";

impl DepthBackend for LuminanceDepth {
    fn id(&self) -> String {
        LUMINANCE_DEPTH_VERSION.to_owned()
    }

    fn concurrency(&self) -> BackendConcurrency {
        BackendConcurrency::Shared
    }

    fn predict(&self, image: &Image) -> Result<(usize, usize, Vec<f64>), DepthError> {
        Ok((image.width(), image.height(), image.luma()))
    }
}

/// Adapter for an external monocular depth model.
///
/// Invoked as `program [args..] <image.png> <out.png>`; on exit status 0,
/// `<out.png>` must hold a single-channel (8- or 16-bit) depth image with
/// larger values nearer.
#[derive(Debug, Clone)]
pub struct CommandDepth {
    pub program: PathBuf,
    pub args: Vec<String>,
    pub version: String,
}

impl DepthBackend for CommandDepth {
    fn id(&self) -> String {
        format!("command:{}@{}", self.program.display(), self.version)
    }

    fn concurrency(&self) -> BackendConcurrency {
        BackendConcurrency::Shared
    }

    fn predict(&self, image: &Image) -> Result<(usize, usize, Vec<f64>), DepthError> {
        let unavailable = |diagnostics: String| DepthError::BackendUnavailable {
            backend: self.program.display().to_string(),
            diagnostics,
        };
        let dir = tempfile::tempdir().map_err(|e| unavailable(e.to_string()))?;
        let input = dir.path().join("image.png");
        let out = dir.path().join("depth.png");
        image.save_png(&input)?;
        let output = Command::new(&self.program)
            .args(&self.args)
            .arg(&input)
            .arg(&out)
            .output()
            .map_err(|e| unavailable(e.to_string()))?;
        if !output.status.success() {
            return Err(unavailable(format!(
                "{}: {}",
                output.status,
                String::from_utf8_lossy(&output.stderr).trim()
            )));
        }
        let map = read_gray16(&out)?;
        Ok((map.0, map.1, map.2.into_iter().map(|v| v as f64 / 65535.0).collect()))
    }
}

/// Runs the backend and checks the result keeps the input's aspect ratio
/// (to within one pixel of rounding at the backend resolution).
pub fn estimate_depth(
    image: &Image,
    source_image_id: &str,
    backend: &dyn DepthBackend,
) -> Result<DepthMap, DepthError> {
    let (w, h, values) = backend.predict(image)?;
    let (iw, ih) = image.dims();
    let expected_h = w as f64 * ih as f64 / iw as f64;
    if w == 0 || h == 0 || (expected_h - h as f64).abs() > 1.0 {
        return Err(DepthError::AspectMismatch {
            input: (iw, ih),
            got: (w, h),
        });
    }
    if values.len() != w * h || values.iter().any(|v| !v.is_finite()) {
        return Err(DepthError::NonFinite);
    }
    Ok(DepthMap::new(w, h, values, source_image_id))
}

/// Affine rescale to `[0, 1]`; constant maps become all `0.5`.
pub fn normalize_depth(map: &DepthMap) -> DepthMap {
    let (lo, hi) = map
        .values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    let values = if range > 0.0 {
        map.values.iter().map(|v| (v - lo) / range).collect()
    } else {
        vec![0.5; map.values.len()]
    };
    DepthMap {
        values,
        normalized: true,
        ..map.clone()
    }
}

/// 16-bit code for a normalized value, rounding half up.
pub fn depth_to_u16(v: f64) -> u16 {
    (v * 65535.0 + 0.5).floor().clamp(0.0, 65535.0) as u16
}

pub fn export_depth_png16(map: &DepthMap, path: &Path) -> Result<(), DepthError> {
    if !map.normalized {
        return Err(DepthError::NotNormalized);
    }
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(
        map.width as u32,
        map.height as u32,
        map.values.iter().map(|&v| depth_to_u16(v)).collect(),
    )
    .expect("depth grid size");
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| DepthError::Png {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

fn read_gray16(path: &Path) -> Result<(usize, usize, Vec<u16>), DepthError> {
    let img = image::open(path).map_err(|e| DepthError::Png {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let gray = img.into_luma16();
    Ok((gray.width() as usize, gray.height() as usize, gray.into_raw()))
}

/// Reads a PNG written by [`export_depth_png16`] back as a normalized map.
pub fn import_depth_png16(path: &Path, source_image_id: &str) -> Result<DepthMap, DepthError> {
    let (w, h, raw) = read_gray16(path)?;
    Ok(DepthMap {
        normalized: true,
        ..DepthMap::new(w, h, raw.into_iter().map(|v| v as f64 / 65535.0).collect(), source_image_id)
    })
}

/// Closed relief solid in millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct ReliefMesh {
    pub vertices: Vec<[f64; 3]>,
    /// Counter-clockwise seen from outside.
    pub triangles: Vec<[u32; 3]>,
    pub base_thickness: f64,
}

/// Builds a watertight relief from a normalized map.
///
/// Layout: a top grid of `H·W` vertices at `z = base + v·height`, a bottom
/// grid of `H·W` vertices at `z = 0`, both split into two triangles per
/// cell, and one quad (two triangles) of side wall per boundary cell edge.
/// Pixel `(y, x)` sits at `(x·pitch, y·pitch)`, so the footprint is
/// `(W−1)·pitch × (H−1)·pitch`.
pub fn depth_to_relief_mesh(
    map: &DepthMap,
    pitch_mm: f64,
    relief_height_mm: f64,
    base_thickness_mm: f64,
) -> Result<ReliefMesh, DepthError> {
    for (name, v) in [
        ("pitch", pitch_mm),
        ("relief height", relief_height_mm),
        ("base thickness", base_thickness_mm),
    ] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(DepthError::InvalidParameter(format!("{name} must be positive, got {v}")));
        }
    }
    if !map.normalized || map.values.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(DepthError::NotNormalized);
    }
    let (w, h) = (map.width, map.height);
    if w < 2 || h < 2 {
        return Err(DepthError::TooSmall { width: w, height: h });
    }

    let plane = (w * h) as u32;
    let top = |y: usize, x: usize| (y * w + x) as u32;
    let bottom = |y: usize, x: usize| plane + (y * w + x) as u32;

    let mut vertices = Vec::with_capacity(2 * w * h);
    for y in 0..h {
        for x in 0..w {
            let z = base_thickness_mm + map.get(y, x) * relief_height_mm;
            vertices.push([x as f64 * pitch_mm, y as f64 * pitch_mm, z]);
        }
    }
    for y in 0..h {
        for x in 0..w {
            vertices.push([x as f64 * pitch_mm, y as f64 * pitch_mm, 0.0]);
        }
    }

    let mut triangles = Vec::with_capacity(4 * (h - 1) * (w - 1) + 4 * (h - 1) + 4 * (w - 1));
    for y in 0..h - 1 {
        for x in 0..w - 1 {
            let (a, b, c, d) = (top(y, x), top(y, x + 1), top(y + 1, x + 1), top(y + 1, x));
            triangles.push([a, b, c]);
            triangles.push([a, c, d]);
            let (a, b, c, d) = (bottom(y, x), bottom(y, x + 1), bottom(y + 1, x + 1), bottom(y + 1, x));
            triangles.push([a, c, b]);
            triangles.push([a, d, c]);
        }
    }

    // Boundary of the top surface walked in the same direction as its
    // triangles: along y = 0 forwards, x = w-1 downwards, y = h-1 backwards,
    // x = 0 upwards.
    let mut boundary = Vec::with_capacity(2 * (w - 1) + 2 * (h - 1));
    for x in 0..w - 1 {
        boundary.push(((0, x), (0, x + 1)));
    }
    for y in 0..h - 1 {
        boundary.push(((y, w - 1), (y + 1, w - 1)));
    }
    for x in (1..w).rev() {
        boundary.push(((h - 1, x), (h - 1, x - 1)));
    }
    for y in (1..h).rev() {
        boundary.push(((y, 0), (y - 1, 0)));
    }
    for ((uy, ux), (vy, vx)) in boundary {
        let (u, v) = (top(uy, ux), top(vy, vx));
        let (ub, vb) = (bottom(uy, ux), bottom(vy, vx));
        triangles.push([v, u, ub]);
        triangles.push([v, ub, vb]);
    }

    Ok(ReliefMesh {
        vertices,
        triangles,
        base_thickness: base_thickness_mm,
    })
}

/// Every undirected edge is shared by exactly two triangles, which traverse
/// it in opposite directions.
pub fn is_watertight(mesh: &ReliefMesh) -> bool {
    let mut directed: HashMap<(u32, u32), usize> = HashMap::new();
    for t in &mesh.triangles {
        if t[0] == t[1] || t[1] == t[2] || t[0] == t[2] {
            return false;
        }
        for k in 0..3 {
            *directed.entry((t[k], t[(k + 1) % 3])).or_default() += 1;
        }
    }
    directed
        .iter()
        .all(|(&(a, b), &n)| n == 1 && directed.get(&(b, a)) == Some(&1))
}

impl ReliefMesh {
    /// Axis-aligned extent `(dx, dy, dz)`.
    pub fn extent(&self) -> [f64; 3] {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for v in &self.vertices {
            for k in 0..3 {
                lo[k] = lo[k].min(v[k]);
                hi[k] = hi[k].max(v[k]);
            }
        }
        [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]]
    }

    fn normal(&self, t: &[u32; 3]) -> [f64; 3] {
        let [a, b, c] = t.map(|i| self.vertices[i as usize]);
        let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
        let n = [
            u[1] * v[2] - u[2] * v[1],
            u[2] * v[0] - u[0] * v[2],
            u[0] * v[1] - u[1] * v[0],
        ];
        let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
        if len > 0.0 {
            n.map(|c| c / len)
        } else {
            [0.0; 3]
        }
    }

    /// Binary STL: 80-byte header, little-endian `u32` count, then per
    /// triangle a normal, three vertices (all `f32`) and a zero `u16`.
    pub fn write_stl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let mut header = [0u8; 80];
        let tag = b"p2d relief mesh (mm)";
        header[..tag.len()].copy_from_slice(tag);
        out.write_all(&header)?;
        out.write_all(&(self.triangles.len() as u32).to_le_bytes())?;
        for t in &self.triangles {
            for c in self.normal(t) {
                out.write_all(&(c as f32).to_le_bytes())?;
            }
            for &i in t {
                for c in self.vertices[i as usize] {
                    out.write_all(&(c as f32).to_le_bytes())?;
                }
            }
            out.write_all(&0u16.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn write_obj<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "# p2d relief mesh, millimetres")?;
        for v in &self.vertices {
            writeln!(out, "v {} {} {}", v[0], v[1], v[2])?;
        }
        for t in &self.triangles {
            writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
        }
        Ok(())
    }

    pub fn save_stl(&self, path: &Path) -> Result<(), DepthError> {
        let file = fs::File::create(path).map_err(io_err(path))?;
        let mut out = BufWriter::new(file);
        self.write_stl(&mut out).map_err(io_err(path))?;
        out.flush().map_err(io_err(path))
    }

    pub fn save_obj(&self, path: &Path) -> Result<(), DepthError> {
        let file = fs::File::create(path).map_err(io_err(path))?;
        let mut out = BufWriter::new(file);
        self.write_obj(&mut out).map_err(io_err(path))?;
        out.flush().map_err(io_err(path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(w: usize, h: usize, values: Vec<f64>) -> DepthMap {
        DepthMap::new(w, h, values, "src")
    }

    #[test]
    fn affine_rescale() {
        let n = normalize_depth(&map(3, 1, vec![2.0, 4.0, 6.0]));
        assert_eq!(n.values, vec![0.0, 0.5, 1.0]);
        assert!(n.normalized);
    }

    #[test]
    fn constant_maps_become_half() {
        let n = normalize_depth(&map(2, 2, vec![7.0; 4]));
        assert_eq!(n.values, vec![0.5; 4]);
        assert_eq!(normalize_depth(&n), n);
    }

    #[test]
    fn png_codes_round_half_up() {
        assert_eq!(depth_to_u16(0.0), 0);
        assert_eq!(depth_to_u16(1.0), 65535);
        assert_eq!(depth_to_u16(0.5), 32768);
    }

    #[test]
    fn export_requires_normalization() {
        let dir = tempfile::tempdir().unwrap();
        let m = map(2, 2, vec![0.0, 1.0, 2.0, 3.0]);
        assert!(matches!(
            export_depth_png16(&m, &dir.path().join("d.png")),
            Err(DepthError::NotNormalized)
        ));
    }

    #[test]
    fn luminance_stub_returns_the_grey_map() {
        let img = Image::from_fn(4, 3, |c, y, x| (c + y + x) as f64 / 10.0);
        let d = estimate_depth(&img, "i", &LuminanceDepth).unwrap();
        assert_eq!(d.values, img.luma());
        assert!(!d.normalized);
        let flat = estimate_depth(&Image::filled(4, 4, [0.2, 0.4, 0.6]), "f", &LuminanceDepth).unwrap();
        assert!(flat.values.iter().all(|&v| v == flat.values[0]));
    }

    #[test]
    fn mesh_rejects_bad_parameters() {
        let m = normalize_depth(&map(2, 2, vec![0.0, 1.0, 0.5, 0.2]));
        assert!(matches!(depth_to_relief_mesh(&m, 0.0, 1.0, 1.0), Err(DepthError::InvalidParameter(_))));
        assert!(matches!(depth_to_relief_mesh(&m, 1.0, -1.0, 1.0), Err(DepthError::InvalidParameter(_))));
        let thin = normalize_depth(&map(1, 3, vec![0.0, 1.0, 0.5]));
        assert!(matches!(depth_to_relief_mesh(&thin, 1.0, 1.0, 1.0), Err(DepthError::TooSmall { .. })));
        let raw = map(2, 2, vec![0.0, 1.0, 0.5, 0.2]);
        assert!(matches!(depth_to_relief_mesh(&raw, 1.0, 1.0, 1.0), Err(DepthError::NotNormalized)));
    }

    #[test]
    fn outward_normals_on_the_top_and_bottom() {
        let m = DepthMap { normalized: true, ..map(2, 2, vec![1.0; 4]) };
        let mesh = depth_to_relief_mesh(&m, 1.0, 1.0, 1.0).unwrap();
        assert_eq!(mesh.normal(&mesh.triangles[0]), [0.0, 0.0, 1.0]);
        assert_eq!(mesh.normal(&mesh.triangles[2]), [0.0, 0.0, -1.0]);
    }
}
