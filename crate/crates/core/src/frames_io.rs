//! Frame sequences, canonical rasters, and their on-disk formats.
//!
//! Pixel `(x, y)` of a `W×H` frame maps to the normalized coordinate
//! `u = (x + 0.5) / W`, `v = (y + 0.5) / H`. Canonical rasters sample the
//! canonical domain on a regular grid: pixel `(x, y)` sits at
//! `(origin_u + x·scale, origin_v + y·scale)`.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb, Rgba};
use ndarray::{Array3, ArrayView3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MIN_IMAGE_SIDE: usize = 8;

#[derive(Debug, Error)]
pub enum FramesError {
    #[error("no files matching `{pattern}` in {dir} (need at least 2)")]
    EmptyDirectory { dir: PathBuf, pattern: String },
    #[error("{path}: expected {expected_w}x{expected_h}, found {found_w}x{found_h}")]
    DimensionMismatch {
        path: PathBuf,
        expected_w: usize,
        expected_h: usize,
        found_w: usize,
        found_h: usize,
    },
    #[error("failed to decode {path}: {reason}")]
    DecodeFailure { path: PathBuf, reason: String },
    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: no sidecar manifest and no explicit geometry given")]
    ManifestMissing { path: PathBuf },
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("invalid pattern `{pattern}`: {reason}")]
    InvalidPattern { pattern: String, reason: String },
}

pub type Result<T, E = FramesError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> FramesError + '_ {
    move |source| FramesError::IoFailure {
        path: path.to_path_buf(),
        source,
    }
}

/// An RGB image with channels in `[0, 1]`, stored `H×W×3`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pixels: Array3<f64>,
}

impl RgbImage {
    pub fn new(pixels: Array3<f64>) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if c != 3 {
            return Err(FramesError::InvalidImage(format!("expected 3 channels, got {c}")));
        }
        if h < MIN_IMAGE_SIDE || w < MIN_IMAGE_SIDE {
            return Err(FramesError::InvalidImage(format!(
                "{w}x{h} is smaller than the {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE} minimum"
            )));
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(FramesError::InvalidImage("non-finite pixel value".into()));
        }
        Ok(Self { pixels })
    }

    /// Builds an image from a function of the pixel index `(x, y)`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Result<Self> {
        let mut pixels = Array3::zeros((height, width, 3));
        for y in 0..height {
            for x in 0..width {
                let rgb = f(x, y);
                for c in 0..3 {
                    pixels[[y, x, c]] = rgb[c];
                }
            }
        }
        Self::new(pixels)
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
        Self::from_fn(height, width, |_, _| rgb)
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn pixels(&self) -> &Array3<f64> {
        &self.pixels
    }

    pub fn view(&self) -> ArrayView3<'_, f64> {
        self.pixels.view()
    }

    pub fn into_pixels(self) -> Array3<f64> {
        self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        [self.pixels[[y, x, 0]], self.pixels[[y, x, 1]], self.pixels[[y, x, 2]]]
    }

    fn in_unit_range(&self) -> bool {
        self.pixels.iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// Clamps into `[0, 1]`, for values produced by arithmetic on valid images.
    pub fn clamped(mut self) -> Self {
        self.pixels.mapv_inplace(|v| v.clamp(0.0, 1.0));
        self
    }
}

/// Normalized coordinate of the center of pixel column `x` (or row) in a
/// dimension of `n` pixels.
#[inline]
pub fn pixel_center(index: usize, n: usize) -> f64 {
    (index as f64 + 0.5) / n as f64
}

/// Normalized time presented to the networks, `index / (T − 1)`.
#[inline]
pub fn normalized_time(index: usize, frame_count: usize) -> f64 {
    if frame_count <= 1 {
        0.0
    } else {
        index as f64 / (frame_count - 1) as f64
    }
}

/// An ordered video of equally sized RGB frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    frames: Vec<RgbImage>,
    fps: Option<f64>,
}

impl FrameSequence {
    pub fn new(frames: Vec<RgbImage>) -> Result<Self> {
        if frames.len() < 2 {
            return Err(FramesError::InvalidImage(format!(
                "a sequence needs at least 2 frames, got {}",
                frames.len()
            )));
        }
        let (h, w) = (frames[0].height(), frames[0].width());
        for f in &frames {
            if f.height() != h || f.width() != w {
                return Err(FramesError::DimensionMismatch {
                    path: PathBuf::from("<memory>"),
                    expected_w: w,
                    expected_h: h,
                    found_w: f.width(),
                    found_h: f.height(),
                });
            }
            if !f.in_unit_range() {
                return Err(FramesError::InvalidImage("frame values outside [0,1]".into()));
            }
        }
        Ok(Self { frames, fps: None })
    }

    pub fn with_fps(mut self, fps: f64) -> Self {
        self.fps = Some(fps);
        self
    }

    pub fn fps(&self) -> Option<f64> {
        self.fps
    }

    pub fn frames(&self) -> &[RgbImage] {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &RgbImage {
        &self.frames[t]
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn height(&self) -> usize {
        self.frames[0].height()
    }

    pub fn width(&self) -> usize {
        self.frames[0].width()
    }

    /// Frames `[start, end)` as a new sequence.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        Self::new(self.frames[start..end].to_vec())
    }
}

/// Geometry of a raster over the canonical domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CanvasSpec {
    pub origin_u: f64,
    pub origin_v: f64,
    pub scale: f64,
    pub height: usize,
    pub width: usize,
}

impl CanvasSpec {
    /// A grid covering `bounds = (u_min, v_min, u_max, v_max)` whose longer
    /// side has `long_side` samples.
    pub fn covering(bounds: (f64, f64, f64, f64), long_side: usize) -> Self {
        let (u0, v0, u1, v1) = bounds;
        let long_side = long_side.max(MIN_IMAGE_SIDE);
        let extent = (u1 - u0).max(v1 - v0).max(1e-12);
        let scale = extent / (long_side - 1) as f64;
        // the slack keeps round-off from adding a spurious extra column
        let width = (((u1 - u0) / scale - 1e-9).ceil().max(0.0) as usize + 1).max(MIN_IMAGE_SIDE);
        let height = (((v1 - v0) / scale - 1e-9).ceil().max(0.0) as usize + 1).max(MIN_IMAGE_SIDE);
        Self {
            origin_u: u0,
            origin_v: v0,
            scale,
            height,
            width,
        }
    }

    /// Canonical coordinate of pixel `(x, y)`.
    #[inline]
    pub fn coord(&self, x: usize, y: usize) -> (f64, f64) {
        (
            self.origin_u + x as f64 * self.scale,
            self.origin_v + y as f64 * self.scale,
        )
    }

    /// Continuous pixel position of canonical point `(u, v)`.
    #[inline]
    pub fn to_pixel(&self, u: f64, v: f64) -> (f64, f64) {
        ((u - self.origin_u) / self.scale, (v - self.origin_v) / self.scale)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(FramesError::InvalidImage(format!("canvas scale must be > 0, got {}", self.scale)));
        }
        if self.height < MIN_IMAGE_SIDE || self.width < MIN_IMAGE_SIDE {
            return Err(FramesError::InvalidImage(format!(
                "canvas {}x{} is smaller than {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}",
                self.width, self.height
            )));
        }
        Ok(())
    }
}

/// A raster view of the canonical domain with 1, 3, or 4 channels.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterCanvas {
    pixels: Array3<f64>,
    origin: (f64, f64),
    scale: f64,
}

impl RasterCanvas {
    pub fn new(pixels: Array3<f64>, origin: (f64, f64), scale: f64) -> Result<Self> {
        let c = pixels.dim().2;
        if ![1, 3, 4].contains(&c) {
            return Err(FramesError::InvalidImage(format!("canvas must have 1, 3 or 4 channels, got {c}")));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(FramesError::InvalidImage(format!("canvas scale must be > 0, got {scale}")));
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(FramesError::InvalidImage("non-finite canvas value".into()));
        }
        Ok(Self { pixels, origin, scale })
    }

    pub fn from_spec(spec: &CanvasSpec, pixels: Array3<f64>) -> Result<Self> {
        let (h, w, _) = pixels.dim();
        if h != spec.height || w != spec.width {
            return Err(FramesError::InvalidImage(format!(
                "pixels are {w}x{h} but the spec is {}x{}",
                spec.width, spec.height
            )));
        }
        Self::new(pixels, (spec.origin_u, spec.origin_v), spec.scale)
    }

    pub fn filled(spec: &CanvasSpec, value: &[f64]) -> Result<Self> {
        let mut pixels = Array3::zeros((spec.height, spec.width, value.len()));
        for ((_, _, c), p) in pixels.indexed_iter_mut() {
            *p = value[c];
        }
        Self::from_spec(spec, pixels)
    }

    pub fn spec(&self) -> CanvasSpec {
        let (h, w, _) = self.pixels.dim();
        CanvasSpec {
            origin_u: self.origin.0,
            origin_v: self.origin.1,
            scale: self.scale,
            height: h,
            width: w,
        }
    }

    pub fn origin(&self) -> (f64, f64) {
        self.origin
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn channels(&self) -> usize {
        self.pixels.dim().2
    }

    pub fn pixels(&self) -> &Array3<f64> {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut Array3<f64> {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Array3<f64> {
        self.pixels
    }

    /// Same origin, scale, and pixel dimensions.
    pub fn same_geometry(&self, other: &RasterCanvas) -> bool {
        self.origin == other.origin
            && self.scale == other.scale
            && self.height() == other.height()
            && self.width() == other.width()
    }

    /// Bilinear sample of channel values at canonical point `(u, v)`.
    /// `None` when the point falls outside the sampled grid.
    pub fn sample_bilinear(&self, u: f64, v: f64, out: &mut [f64]) -> bool {
        let (px, py) = self.spec().to_pixel(u, v);
        sample_bilinear(self.pixels.view(), px, py, out)
    }

    /// Nearest-neighbor sample at canonical point `(u, v)`.
    pub fn sample_nearest(&self, u: f64, v: f64, out: &mut [f64]) -> bool {
        let (px, py) = self.spec().to_pixel(u, v);
        let (h, w, c) = self.pixels.dim();
        let (xi, yi) = (px.round(), py.round());
        if !(xi >= 0.0 && yi >= 0.0 && xi <= (w - 1) as f64 && yi <= (h - 1) as f64) {
            return false;
        }
        let (xi, yi) = (xi as usize, yi as usize);
        for (ch, o) in out.iter_mut().enumerate().take(c) {
            *o = self.pixels[[yi, xi, ch]];
        }
        true
    }
}

/// Bilinear sample at continuous pixel position `(px, py)`, where integer
/// positions are pixel centers. Returns false outside `[0, W−1]×[0, H−1]`.
/// At integer positions the result is the stored value exactly.
pub fn sample_bilinear(pixels: ArrayView3<'_, f64>, px: f64, py: f64, out: &mut [f64]) -> bool {
    let (h, w, c) = pixels.dim();
    let max_x = (w - 1) as f64;
    let max_y = (h - 1) as f64;
    // small slack so round-off at the border does not reject exact hits
    const SLACK: f64 = 1e-9;
    if !(px >= -SLACK && py >= -SLACK && px <= max_x + SLACK && py <= max_y + SLACK) {
        return false;
    }
    let px = px.clamp(0.0, max_x);
    let py = py.clamp(0.0, max_y);
    let x0 = (px.floor() as usize).min(w - 1);
    let y0 = (py.floor() as usize).min(h - 1);
    let fx = px - x0 as f64;
    let fy = py - y0 as f64;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    for (ch, o) in out.iter_mut().enumerate().take(c) {
        let a = pixels[[y0, x0, ch]];
        let top = if fx == 0.0 { a } else { a * (1.0 - fx) + pixels[[y0, x1, ch]] * fx };
        let bottom = if fy == 0.0 {
            top
        } else {
            let b = pixels[[y1, x0, ch]];
            let b = if fx == 0.0 { b } else { b * (1.0 - fx) + pixels[[y1, x1, ch]] * fx };
            top * (1.0 - fy) + b * fy
        };
        *o = bottom;
    }
    true
}

/// Resamples an `H×W×C` array to `height×width` with bilinear
/// interpolation, corner pixel centers mapped onto corner pixel centers.
pub fn resize_bilinear(pixels: &Array3<f64>, height: usize, width: usize) -> Array3<f64> {
    let (h, w, c) = pixels.dim();
    let sx = if width > 1 { (w - 1) as f64 / (width - 1) as f64 } else { 0.0 };
    let sy = if height > 1 { (h - 1) as f64 / (height - 1) as f64 } else { 0.0 };
    let mut out = Array3::zeros((height, width, c));
    let mut px = vec![0.0; c];
    for y in 0..height {
        for x in 0..width {
            sample_bilinear(pixels.view(), x as f64 * sx, y as f64 * sy, &mut px);
            for ch in 0..c {
                out[[y, x, ch]] = px[ch];
            }
        }
    }
    out
}

/// Writes `bytes` to `path` via a sibling temp file and a rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode_png(pixels: ArrayView3<'_, f64>) -> Result<Vec<u8>> {
    let (h, w, c) = pixels.dim();
    let raw: Vec<u8> = pixels.iter().map(|&v| quantize(v)).collect();
    let mut out = io::Cursor::new(Vec::new());
    let res = match c {
        1 => ImageBuffer::<Luma<u8>, _>::from_raw(w as u32, h as u32, raw)
            .expect("buffer size")
            .write_to(&mut out, image::ImageFormat::Png),
        3 => ImageBuffer::<Rgb<u8>, _>::from_raw(w as u32, h as u32, raw)
            .expect("buffer size")
            .write_to(&mut out, image::ImageFormat::Png),
        4 => ImageBuffer::<Rgba<u8>, _>::from_raw(w as u32, h as u32, raw)
            .expect("buffer size")
            .write_to(&mut out, image::ImageFormat::Png),
        _ => return Err(FramesError::InvalidImage(format!("cannot encode {c} channels"))),
    };
    res.map_err(|e| FramesError::InvalidImage(e.to_string()))?;
    Ok(out.into_inner())
}

/// Encodes an `H×W×C` array (values in `[0,1]`, C ∈ {1,3,4}) as 8-bit PNG.
pub fn png_bytes(pixels: ArrayView3<'_, f64>) -> Result<Vec<u8>> {
    encode_png(pixels)
}

/// Decodes PNG bytes into an `H×W×channels` array in `[0,1]`.
pub fn decode_png(bytes: &[u8], channels: usize) -> std::result::Result<Array3<f64>, String> {
    let img = image::load_from_memory(bytes).map_err(|e| e.to_string())?;
    Ok(dynamic_to_array(img, channels))
}

fn dynamic_to_array(img: image::DynamicImage, channels: usize) -> Array3<f64> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = match channels {
        1 => img.to_luma32f().into_raw().into_iter().map(f64::from).collect(),
        3 => img.to_rgb32f().into_raw().into_iter().map(f64::from).collect(),
        _ => img.to_rgba32f().into_raw().into_iter().map(f64::from).collect(),
    };
    let mut arr = Array3::from_shape_vec((h, w, channels), data).expect("decoded buffer size");
    // f32 decode of 8-bit values is not exactly k/255 in f64; snap to the grid.
    arr.mapv_inplace(|v| ((v * 255.0).round() / 255.0).clamp(0.0, 1.0));
    arr
}

fn decode_file(path: &Path, channels: usize) -> Result<Array3<f64>> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_png(&bytes, channels).map_err(|reason| FramesError::DecodeFailure {
        path: path.to_path_buf(),
        reason,
    })
}

/// Loads every file in `dir` whose name matches the glob `pattern`, sorted
/// lexicographically by file name.
pub fn load_frames(dir: &Path, pattern: &str) -> Result<FrameSequence> {
    let matcher = glob::Pattern::new(pattern).map_err(|e| FramesError::InvalidPattern {
        pattern: pattern.to_string(),
        reason: e.to_string(),
    })?;
    let entries = fs::read_dir(dir).map_err(io_err(dir))?;
    let mut files: Vec<(String, PathBuf)> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(io_err(dir))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if matcher.matches(&name) && entry.path().is_file() {
            files.push((name, entry.path()));
        }
    }
    if files.len() < 2 {
        return Err(FramesError::EmptyDirectory {
            dir: dir.to_path_buf(),
            pattern: pattern.to_string(),
        });
    }
    files.sort_by(|a, b| a.0.cmp(&b.0));

    let mut frames = Vec::with_capacity(files.len());
    let mut dims: Option<(usize, usize)> = None;
    for (_, path) in &files {
        let pixels = decode_file(path, 3)?;
        let (h, w, _) = pixels.dim();
        match dims {
            None => dims = Some((h, w)),
            Some((eh, ew)) if eh != h || ew != w => {
                return Err(FramesError::DimensionMismatch {
                    path: path.clone(),
                    expected_w: ew,
                    expected_h: eh,
                    found_w: w,
                    found_h: h,
                })
            }
            _ => {}
        }
        let frame = RgbImage::new(pixels).map_err(|e| FramesError::DecodeFailure {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        frames.push(frame);
    }
    FrameSequence::new(frames)
}

/// File name used for frame `index` by [`save_frames`].
pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:05}.png")
}

/// Writes each frame as 8-bit PNG `frame_%05d.png` into `dir` (created if absent).
pub fn save_frames(seq: &FrameSequence, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (i, frame) in seq.frames().iter().enumerate() {
        let bytes = encode_png(frame.view())?;
        atomic_write(&dir.join(frame_file_name(i)), &bytes)?;
    }
    Ok(())
}

/// Sidecar manifest written next to an exported canonical image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CanonicalManifest {
    pub origin_u: f64,
    pub origin_v: f64,
    pub scale: f64,
    pub height: usize,
    pub width: usize,
}

/// `dir/name.png` → `dir/name.canonical.json`.
pub fn sidecar_path(image_path: &Path) -> PathBuf {
    let stem = image_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    image_path.with_file_name(format!("{stem}.canonical.json"))
}

/// Writes `canvas` as PNG plus its `<name>.canonical.json` geometry sidecar.
pub fn export_canonical(canvas: &RasterCanvas, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let bytes = encode_png(canvas.pixels().view())?;
    atomic_write(path, &bytes)?;
    let manifest = CanonicalManifest {
        origin_u: canvas.origin().0,
        origin_v: canvas.origin().1,
        scale: canvas.scale(),
        height: canvas.height(),
        width: canvas.width(),
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    atomic_write(&sidecar_path(path), &json)
}

/// Explicit canonical placement, used when a file has no sidecar.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Placement {
    pub origin: (f64, f64),
    pub scale: f64,
}

/// Reads a canonical image. Geometry comes from `placement` when given,
/// otherwise from the sidecar manifest. Channel count follows the file:
/// grayscale → 1, RGB → 3, anything with alpha → 4.
pub fn import_canonical(path: &Path, placement: Option<Placement>) -> Result<RasterCanvas> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let img = image::load_from_memory(&bytes).map_err(|e| FramesError::DecodeFailure {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let channels = match img.color().channel_count() {
        1 => 1,
        2 | 4 => 4,
        _ => 3,
    };
    let pixels = dynamic_to_array(img, channels);
    let (h, w, _) = pixels.dim();

    let placement = match placement {
        Some(p) => p,
        None => {
            let sidecar = sidecar_path(path);
            if !sidecar.exists() {
                return Err(FramesError::ManifestMissing { path: path.to_path_buf() });
            }
            let text = fs::read(&sidecar).map_err(io_err(&sidecar))?;
            let m: CanonicalManifest = serde_json::from_slice(&text).map_err(|e| FramesError::DecodeFailure {
                path: sidecar.clone(),
                reason: e.to_string(),
            })?;
            if m.height != h || m.width != w {
                return Err(FramesError::DimensionMismatch {
                    path: path.to_path_buf(),
                    expected_w: m.width,
                    expected_h: m.height,
                    found_w: w,
                    found_h: h,
                });
            }
            Placement {
                origin: (m.origin_u, m.origin_v),
                scale: m.scale,
            }
        }
    };
    RasterCanvas::new(pixels, placement.origin, placement.scale)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_frame(h: usize, w: usize, phase: f64) -> RgbImage {
        RgbImage::from_fn(h, w, |x, y| {
            [
                (x as f64 / w as f64 + phase).fract(),
                y as f64 / h as f64,
                0.25,
            ]
        })
        .unwrap()
    }

    #[test]
    fn pixel_center_convention() {
        assert_eq!(pixel_center(0, 96), 0.5 / 96.0);
        assert_eq!(pixel_center(95, 96), 95.5 / 96.0);
        assert_eq!(normalized_time(0, 10), 0.0);
        assert_eq!(normalized_time(9, 10), 1.0);
    }

    #[test]
    fn save_load_roundtrip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let seq = FrameSequence::new(vec![gradient_frame(12, 16, 0.0), gradient_frame(12, 16, 0.3)]).unwrap();
        save_frames(&seq, dir.path()).unwrap();
        let back = load_frames(dir.path(), "frame_*.png").unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in seq.frames().iter().zip(back.frames()) {
            let max = a
                .pixels()
                .iter()
                .zip(b.pixels().iter())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            assert!(max <= 1.0 / 255.0 + 1e-12, "max diff {max}");
        }
    }

    #[test]
    fn save_names_are_zero_padded() {
        let dir = tempfile::tempdir().unwrap();
        let frames = (0..100).map(|_| RgbImage::filled(8, 8, [0.1, 0.2, 0.3]).unwrap()).collect();
        save_frames(&FrameSequence::new(frames).unwrap(), dir.path()).unwrap();
        let mut names: Vec<_> = fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        names.sort();
        assert_eq!(names.len(), 100);
        assert_eq!(names[0], "frame_00000.png");
        assert_eq!(names[99], "frame_00099.png");
    }

    #[test]
    fn minimal_black_pair() {
        let dir = tempfile::tempdir().unwrap();
        let black = RgbImage::filled(8, 8, [0.0; 3]).unwrap();
        save_frames(&FrameSequence::new(vec![black.clone(), black]).unwrap(), dir.path()).unwrap();
        let seq = load_frames(dir.path(), "*.png").unwrap();
        assert_eq!(seq.len(), 2);
        assert!(seq.frames().iter().all(|f| f.pixels().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn mismatched_dimensions_name_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let big = encode_png(Array3::zeros((64, 64, 3)).view()).unwrap();
        let small = encode_png(Array3::zeros((32, 32, 3)).view()).unwrap();
        fs::write(dir.path().join("a.png"), big).unwrap();
        fs::write(dir.path().join("b.png"), small).unwrap();
        match load_frames(dir.path(), "*.png") {
            Err(FramesError::DimensionMismatch { path, .. }) => assert!(path.ends_with("b.png")),
            other => panic!("expected DimensionMismatch, got {other:?}"),
        }
    }

    #[test]
    fn empty_directory_and_decode_failure() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_frames(dir.path(), "*.png"), Err(FramesError::EmptyDirectory { .. })));
        fs::write(dir.path().join("a.png"), b"not a png").unwrap();
        fs::write(dir.path().join("b.png"), b"not a png").unwrap();
        match load_frames(dir.path(), "*.png") {
            Err(FramesError::DecodeFailure { path, .. }) => assert!(path.ends_with("a.png")),
            other => panic!("expected DecodeFailure, got {other:?}"),
        }
    }

    #[test]
    fn order_follows_file_names() {
        let dir = tempfile::tempdir().unwrap();
        // written in reverse so creation order disagrees with name order
        for (name, value) in [("c.png", 0.8), ("a.png", 0.2), ("b.png", 0.4)] {
            let bytes = encode_png(Array3::from_elem((8, 8, 3), value).view()).unwrap();
            fs::write(dir.path().join(name), bytes).unwrap();
        }
        let seq = load_frames(dir.path(), "*.png").unwrap();
        let firsts: Vec<f64> = seq.frames().iter().map(|f| f.get(0, 0)[0]).collect();
        assert!(firsts[0] < firsts[1] && firsts[1] < firsts[2]);
    }

    #[cfg(unix)]
    #[test]
    fn save_to_read_only_dir_fails() {
        use std::os::unix::fs::PermissionsExt;
        let dir = tempfile::tempdir().unwrap();
        let ro = dir.path().join("ro");
        fs::create_dir(&ro).unwrap();
        fs::set_permissions(&ro, fs::Permissions::from_mode(0o555)).unwrap();
        // root ignores permission bits; only assert when the write really is refused
        if fs::write(ro.join("probe"), b"x").is_ok() {
            return;
        }
        let seq = FrameSequence::new(vec![gradient_frame(8, 8, 0.0), gradient_frame(8, 8, 0.1)]).unwrap();
        assert!(matches!(save_frames(&seq, &ro), Err(FramesError::IoFailure { .. })));
    }

    #[test]
    fn save_under_a_file_fails_with_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("plain");
        fs::write(&file, b"x").unwrap();
        let seq = FrameSequence::new(vec![gradient_frame(8, 8, 0.0), gradient_frame(8, 8, 0.1)]).unwrap();
        assert!(matches!(save_frames(&seq, &file.join("sub")), Err(FramesError::IoFailure { .. })));
    }

    #[test]
    fn canonical_export_import_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("canon.png");
        let pixels = Array3::from_shape_fn((20, 30, 3), |(y, x, c)| ((x + 2 * y + c) % 7) as f64 / 6.0);
        let canvas = RasterCanvas::new(pixels, (-0.2, -0.1), 0.002).unwrap();
        export_canonical(&canvas, &path).unwrap();
        assert!(dir.path().join("canon.canonical.json").exists());
        let back = import_canonical(&path, None).unwrap();
        assert_eq!(back.origin(), (-0.2, -0.1));
        assert_eq!(back.scale(), 0.002);
        let max = canvas
            .pixels()
            .iter()
            .zip(back.pixels().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max <= 1.0 / 255.0);
    }

    #[test]
    fn user_edited_png_keeps_geometry() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.png");
        let canvas = RasterCanvas::new(Array3::from_elem((16, 16, 3), 0.5), (0.1, 0.2), 0.05).unwrap();
        export_canonical(&canvas, &path).unwrap();

        // simulate an external editor painting over the exported file
        let mut img = image::open(&path).unwrap().to_rgb8();
        for y in 4..8 {
            for x in 4..8 {
                img.put_pixel(x, y, Rgb([255, 0, 0]));
            }
        }
        img.save(&path).unwrap();

        let back = import_canonical(&path, None).unwrap();
        assert_eq!(back.spec(), canvas.spec());
        assert_eq!(back.pixels()[[5, 5, 0]], 1.0);
        assert_eq!(back.pixels()[[5, 5, 1]], 0.0);
        assert!((back.pixels()[[0, 0, 0]] - 0.5).abs() <= 1.0 / 255.0);
    }

    #[test]
    fn import_without_geometry_is_manifest_missing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bare.png");
        fs::write(&path, encode_png(Array3::zeros((8, 8, 3)).view()).unwrap()).unwrap();
        assert!(matches!(import_canonical(&path, None), Err(FramesError::ManifestMissing { .. })));
        let explicit = import_canonical(
            &path,
            Some(Placement {
                origin: (0.0, 0.0),
                scale: 0.1,
            }),
        )
        .unwrap();
        assert_eq!(explicit.scale(), 0.1);
    }

    #[test]
    fn rgba_canvas_roundtrips_alpha() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("edit.png");
        let mut pixels = Array3::zeros((8, 8, 4));
        pixels[[2, 3, 3]] = 1.0;
        pixels[[2, 3, 0]] = 1.0;
        let canvas = RasterCanvas::new(pixels, (0.0, 0.0), 0.125).unwrap();
        export_canonical(&canvas, &path).unwrap();
        let back = import_canonical(&path, None).unwrap();
        assert_eq!(back.channels(), 4);
        assert_eq!(back.pixels(), canvas.pixels());
    }

    #[test]
    fn bilinear_is_exact_at_pixel_centers() {
        let pixels = Array3::from_shape_fn((8, 8, 1), |(y, x, _)| (x * 10 + y) as f64 / 100.0);
        let mut out = [0.0];
        assert!(sample_bilinear(pixels.view(), 3.0, 5.0, &mut out));
        assert_eq!(out[0], pixels[[5, 3, 0]]);
        assert!(sample_bilinear(pixels.view(), 3.5, 5.0, &mut out));
        assert!((out[0] - (pixels[[5, 3, 0]] + pixels[[5, 4, 0]]) / 2.0).abs() < 1e-15);
        assert!(!sample_bilinear(pixels.view(), 7.5, 0.0, &mut out));
        assert!(!sample_bilinear(pixels.view(), -0.1, 0.0, &mut out));
    }

    #[test]
    fn rejects_bad_images() {
        assert!(RgbImage::new(Array3::zeros((4, 8, 3))).is_err());
        let mut nan = Array3::zeros((8, 8, 3));
        nan[[0, 0, 0]] = f64::NAN;
        assert!(RgbImage::new(nan).is_err());
        let single = vec![RgbImage::filled(8, 8, [0.0; 3]).unwrap()];
        assert!(FrameSequence::new(single).is_err());
        assert!(RasterCanvas::new(Array3::zeros((8, 8, 2)), (0.0, 0.0), 1.0).is_err());
        assert!(RasterCanvas::new(Array3::zeros((8, 8, 3)), (0.0, 0.0), 0.0).is_err());
    }
}
