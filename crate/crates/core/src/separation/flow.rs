//! Dense optical flow between images: the field type, backward warping, a
//! brute-force block-matching reference backend, and a float32 cache format.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3, ArrayView3};
use thiserror::Error;

use crate::frames_io::{atomic_write, sample_bilinear, RgbImage};

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("flow backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("flow cache {path}: {reason}")]
    Cache { path: String, reason: String },
}

/// Per-pixel displacement in normalized units: pixel `(x, y)` of the source
/// grid corresponds to `(u + du, v + dv)` in the other image.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    vectors: Array3<f64>,
    valid: Array2<bool>,
}

impl FlowField {
    pub fn new(vectors: Array3<f64>, valid: Array2<bool>) -> Result<Self, FlowError> {
        let (h, w, c) = vectors.dim();
        if c != 2 || valid.dim() != (h, w) {
            return Err(FlowError::DimensionMismatch(format!(
                "vectors {:?} and mask {:?} disagree",
                vectors.dim(),
                valid.dim()
            )));
        }
        let mut valid = valid;
        for ((y, x), ok) in valid.indexed_iter_mut() {
            if !(vectors[[y, x, 0]].is_finite() && vectors[[y, x, 1]].is_finite()) {
                *ok = false;
            }
        }
        Ok(Self { vectors, valid })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::uniform(height, width, 0.0, 0.0)
    }

    pub fn uniform(height: usize, width: usize, du: f64, dv: f64) -> Self {
        Self::from_fn(height, width, |_, _| Some((du, dv)))
    }

    /// Builds a field from a per-pixel closure returning normalized
    /// displacement, or `None` for an invalid pixel.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> Option<(f64, f64)>) -> Self {
        let mut vectors = Array3::zeros((height, width, 2));
        let mut valid = Array2::from_elem((height, width), false);
        for y in 0..height {
            for x in 0..width {
                if let Some((du, dv)) = f(x, y) {
                    if du.is_finite() && dv.is_finite() {
                        vectors[[y, x, 0]] = du;
                        vectors[[y, x, 1]] = dv;
                        valid[[y, x]] = true;
                    }
                }
            }
        }
        Self { vectors, valid }
    }

    pub fn height(&self) -> usize {
        self.valid.nrows()
    }

    pub fn width(&self) -> usize {
        self.valid.ncols()
    }

    pub fn vectors(&self) -> &Array3<f64> {
        &self.vectors
    }

    pub fn valid_mask(&self) -> &Array2<bool> {
        &self.valid
    }

    pub fn valid_fraction(&self) -> f64 {
        self.valid.iter().filter(|v| **v).count() as f64 / self.valid.len().max(1) as f64
    }

    pub fn get(&self, x: usize, y: usize) -> Option<(f64, f64)> {
        self.valid[[y, x]].then(|| (self.vectors[[y, x, 0]], self.vectors[[y, x, 1]]))
    }

    /// Displacement at `(x, y)` in pixels.
    pub fn get_pixels(&self, x: usize, y: usize) -> Option<(f64, f64)> {
        self.get(x, y)
            .map(|(du, dv)| (du * self.width() as f64, dv * self.height() as f64))
    }

    /// Target pixel position of source pixel `(x, y)`.
    pub fn target_pixel(&self, x: usize, y: usize) -> Option<(f64, f64)> {
        self.get_pixels(x, y).map(|(dx, dy)| (x as f64 + dx, y as f64 + dy))
    }

    /// Bilinear interpolation of the field at a continuous pixel position;
    /// `None` outside the grid or when a contributing pixel is invalid.
    pub fn sample(&self, px: f64, py: f64) -> Option<(f64, f64)> {
        let (h, w) = (self.height(), self.width());
        if !(px >= 0.0 && py >= 0.0 && px <= (w - 1) as f64 && py <= (h - 1) as f64) {
            return None;
        }
        let x0 = px.floor() as usize;
        let y0 = py.floor() as usize;
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let (fx, fy) = (px - x0 as f64, py - y0 as f64);
        for (x, y, wgt) in [
            (x0, y0, (1.0 - fx) * (1.0 - fy)),
            (x1, y0, fx * (1.0 - fy)),
            (x0, y1, (1.0 - fx) * fy),
            (x1, y1, fx * fy),
        ] {
            if wgt > 0.0 && !self.valid[[y, x]] {
                return None;
            }
        }
        let mut out = [0.0; 2];
        sample_bilinear(self.vectors.view(), px, py, &mut out);
        Some((out[0], out[1]))
    }

    /// Flow of "follow `self`, then follow `next`" on `self`'s grid.
    pub fn then(&self, next: &FlowField) -> Result<FlowField, FlowError> {
        check_dims(self.height(), self.width(), next.height(), next.width())?;
        let (h, w) = (self.height() as f64, self.width() as f64);
        Ok(Self::from_fn(self.height(), self.width(), |x, y| {
            let (du, dv) = self.get(x, y)?;
            let (du2, dv2) = next.sample(x as f64 + du * w, y as f64 + dv * h)?;
            Some((du + du2, dv + dv2))
        }))
    }

    /// Writes `magic, height, width` (u32 LE) then `du, dv, valid` per pixel
    /// as float32.
    pub fn save(&self, path: &Path) -> Result<(), FlowError> {
        let (h, w) = (self.height(), self.width());
        let mut bytes = Vec::with_capacity(12 + h * w * 12);
        bytes.extend_from_slice(CACHE_MAGIC);
        bytes.extend_from_slice(&(h as u32).to_le_bytes());
        bytes.extend_from_slice(&(w as u32).to_le_bytes());
        for y in 0..h {
            for x in 0..w {
                let valid = self.valid[[y, x]];
                let (du, dv) = if valid { (self.vectors[[y, x, 0]], self.vectors[[y, x, 1]]) } else { (0.0, 0.0) };
                for v in [du as f32, dv as f32, if valid { 1.0 } else { 0.0 }] {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        atomic_write(path, &bytes).map_err(|e| cache_err(path, e.to_string()))
    }

    pub fn load(path: &Path) -> Result<FlowField, FlowError> {
        let bytes = fs::read(path).map_err(|e| cache_err(path, e.to_string()))?;
        if bytes.len() < 12 || &bytes[..4] != CACHE_MAGIC {
            return Err(cache_err(path, "missing flow header".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
        let (h, w) = (word(4), word(8));
        if bytes.len() != 12 + h * w * 12 {
            return Err(cache_err(path, format!("expected {} bytes for {w}x{h}, found {}", 12 + h * w * 12, bytes.len())));
        }
        let float = |i: usize| f32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as f64;
        Ok(Self::from_fn(h, w, |x, y| {
            let base = 12 + (y * w + x) * 12;
            (float(base + 8) != 0.0).then(|| (float(base), float(base + 4)))
        }))
    }
}

const CACHE_MAGIC: &[u8; 4] = b"NFLW";

fn cache_err(path: &Path, reason: String) -> FlowError {
    FlowError::Cache {
        path: path.display().to_string(),
        reason,
    }
}

fn check_dims(h1: usize, w1: usize, h2: usize, w2: usize) -> Result<(), FlowError> {
    if (h1, w1) != (h2, w2) {
        return Err(FlowError::DimensionMismatch(format!("{w1}x{h1} vs {w2}x{h2}")));
    }
    Ok(())
}

/// Samples `source` at `p + flow(p)` for every pixel `p` of the flow grid.
/// Returns the warped pixels and a mask of pixels that were both valid in
/// the flow and landed inside `source`.
pub fn backward_warp(source: ArrayView3<'_, f64>, flow: &FlowField) -> Result<(Array3<f64>, Array2<bool>), FlowError> {
    let (h, w, c) = source.dim();
    check_dims(h, w, flow.height(), flow.width())?;
    let mut out = Array3::zeros((h, w, c));
    let mut mask = Array2::from_elem((h, w), false);
    let mut px = vec![0.0; c];
    for y in 0..h {
        for x in 0..w {
            let Some((tx, ty)) = flow.target_pixel(x, y) else { continue };
            if sample_bilinear(source, tx, ty, &mut px) {
                for ch in 0..c {
                    out[[y, x, ch]] = px[ch];
                }
                mask[[y, x]] = true;
            }
        }
    }
    Ok((out, mask))
}

/// Which frames of a sequence a flow request refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PairIndex {
    pub from: usize,
    pub to: usize,
}

/// Source of dense flow `from → to`. Backends receive the frame indices so
/// analytic or cached backends can answer without looking at pixels.
pub trait FlowBackend {
    fn name(&self) -> &str;
    fn flow(&mut self, from: &RgbImage, to: &RgbImage, pair: PairIndex) -> Result<FlowField, FlowError>;
}

/// Dense flow from `a` to `b` with dimension checking.
pub fn flow_between(a: &RgbImage, b: &RgbImage, pair: PairIndex, backend: &mut dyn FlowBackend) -> Result<FlowField, FlowError> {
    check_dims(a.height(), a.width(), b.height(), b.width())?;
    let flow = backend.flow(a, b, pair)?;
    check_dims(a.height(), a.width(), flow.height(), flow.width())?;
    Ok(flow)
}

/// Exhaustive integer-shift block matching with a parabolic sub-pixel
/// refinement. Slow, but simple enough to serve as a test oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockMatching {
    pub patch: usize,
    pub radius: usize,
    /// Minimum mean per-channel variance for a patch to count as textured.
    pub min_variance: f64,
}

impl Default for BlockMatching {
    fn default() -> Self {
        Self {
            patch: 8,
            radius: 12,
            min_variance: 1e-4,
        }
    }
}

/// Box sums over the window `[x−lo, x+hi]×[y−lo, y+hi]` clipped to the grid.
fn box_sums(values: &Array2<f64>, lo: usize, hi: usize) -> Array2<f64> {
    let (h, w) = values.dim();
    let mut integral = Array2::<f64>::zeros((h + 1, w + 1));
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += values[[y, x]];
            integral[[y + 1, x + 1]] = integral[[y, x + 1]] + row;
        }
    }
    Array2::from_shape_fn((h, w), |(y, x)| {
        let (x0, x1) = (x.saturating_sub(lo), (x + hi + 1).min(w));
        let (y0, y1) = (y.saturating_sub(lo), (y + hi + 1).min(h));
        integral[[y1, x1]] - integral[[y0, x1]] - integral[[y1, x0]] + integral[[y0, x0]]
    })
}

impl BlockMatching {
    fn window(&self) -> (usize, usize) {
        let lo = self.patch / 2;
        (lo, self.patch.saturating_sub(lo + 1))
    }

    fn patch_cost(&self, a: &Array3<f64>, b: &Array3<f64>, x: usize, y: usize, sx: isize, sy: isize) -> Option<f64> {
        let (h, w, c) = a.dim();
        let (lo, hi) = self.window();
        let (mut sum, mut n) = (0.0, 0usize);
        for py in y.saturating_sub(lo)..(y + hi + 1).min(h) {
            for px in x.saturating_sub(lo)..(x + hi + 1).min(w) {
                let (qx, qy) = (px as isize + sx, py as isize + sy);
                if qx < 0 || qy < 0 || qx >= w as isize || qy >= h as isize {
                    continue;
                }
                for ch in 0..c {
                    let d = a[[py, px, ch]] - b[[qy as usize, qx as usize, ch]];
                    sum += d * d;
                }
                n += 1;
            }
        }
        (n > 0).then(|| sum / n as f64)
    }

    /// Offset of the minimum of a parabola through three samples.
    fn parabola(minus: Option<f64>, center: f64, plus: Option<f64>) -> f64 {
        match (minus, plus) {
            (Some(m), Some(p)) => {
                let denom = m - 2.0 * center + p;
                if denom > 1e-12 {
                    (0.5 * (m - p) / denom).clamp(-0.5, 0.5)
                } else {
                    0.0
                }
            }
            _ => 0.0,
        }
    }

    pub fn compute(&self, a: &RgbImage, b: &RgbImage) -> Result<FlowField, FlowError> {
        check_dims(a.height(), a.width(), b.height(), b.width())?;
        let (h, w) = (a.height(), a.width());
        let (pa, pb) = (a.pixels(), b.pixels());
        let (lo, hi) = self.window();
        let full = (self.patch * self.patch) as f64;

        // textured-ness of each source patch
        let sum_a = box_sums(&Array2::from_shape_fn((h, w), |(y, x)| (0..3).map(|c| pa[[y, x, c]]).sum()), lo, hi);
        let sum_a2 = box_sums(&Array2::from_shape_fn((h, w), |(y, x)| (0..3).map(|c| pa[[y, x, c]].powi(2)).sum()), lo, hi);
        let count = box_sums(&Array2::from_elem((h, w), 1.0), lo, hi);
        let textured = Array2::from_shape_fn((h, w), |(y, x)| {
            let n = count[[y, x]] * 3.0;
            let mean = sum_a[[y, x]] / n;
            sum_a2[[y, x]] / n - mean * mean >= self.min_variance
        });

        // shifts ordered by length so ties resolve toward the smallest motion
        let r = self.radius as isize;
        let mut shifts: Vec<(isize, isize)> = (-r..=r).flat_map(|sy| (-r..=r).map(move |sx| (sx, sy))).collect();
        shifts.sort_by_key(|&(sx, sy)| (sx * sx + sy * sy, sy, sx));

        let mut best_cost = Array2::from_elem((h, w), f64::INFINITY);
        let mut best_shift = Array2::from_elem((h, w), (0isize, 0isize));
        let mut diff = Array2::<f64>::zeros((h, w));
        let mut inside = Array2::<f64>::zeros((h, w));
        for &(sx, sy) in &shifts {
            for y in 0..h {
                for x in 0..w {
                    let (qx, qy) = (x as isize + sx, y as isize + sy);
                    if qx < 0 || qy < 0 || qx >= w as isize || qy >= h as isize {
                        diff[[y, x]] = 0.0;
                        inside[[y, x]] = 0.0;
                        continue;
                    }
                    let (qx, qy) = (qx as usize, qy as usize);
                    diff[[y, x]] = (0..3).map(|c| (pa[[y, x, c]] - pb[[qy, qx, c]]).powi(2)).sum();
                    inside[[y, x]] = 1.0;
                }
            }
            let sums = box_sums(&diff, lo, hi);
            let counts = box_sums(&inside, lo, hi);
            for y in 0..h {
                for x in 0..w {
                    // demand at least half a patch of overlap
                    if counts[[y, x]] * 2.0 < full.min(count[[y, x]]) {
                        continue;
                    }
                    let cost = sums[[y, x]] / counts[[y, x]];
                    if cost < best_cost[[y, x]] - 1e-12 {
                        best_cost[[y, x]] = cost;
                        best_shift[[y, x]] = (sx, sy);
                    }
                }
            }
        }

        Ok(FlowField::from_fn(h, w, |x, y| {
            if !textured[[y, x]] || !best_cost[[y, x]].is_finite() {
                return None;
            }
            let (sx, sy) = best_shift[[y, x]];
            let c = best_cost[[y, x]];
            if c == 0.0 {
                return Some((sx as f64 / w as f64, sy as f64 / h as f64));
            }
            let cost = |dx: isize, dy: isize| {
                if (sx + dx).abs() > r || (sy + dy).abs() > r {
                    return None;
                }
                self.patch_cost(pa, pb, x, y, sx + dx, sy + dy)
            };
            let fx = sx as f64 + Self::parabola(cost(-1, 0), c, cost(1, 0));
            let fy = sy as f64 + Self::parabola(cost(0, -1), c, cost(0, 1));
            Some((fx / w as f64, fy / h as f64))
        }))
    }
}

impl FlowBackend for BlockMatching {
    fn name(&self) -> &str {
        "block_matching"
    }

    fn flow(&mut self, from: &RgbImage, to: &RgbImage, _pair: PairIndex) -> Result<FlowField, FlowError> {
        self.compute(from, to)
    }
}

/// Flow given in closed form per frame pair: the closure maps
/// `(pair, x, y)` to a normalized displacement.
pub struct AnalyticFlow<F> {
    f: F,
}

impl<F: FnMut(PairIndex, usize, usize) -> Option<(f64, f64)>> AnalyticFlow<F> {
    pub fn new(f: F) -> Self {
        Self { f }
    }
}

impl<F: FnMut(PairIndex, usize, usize) -> Option<(f64, f64)>> FlowBackend for AnalyticFlow<F> {
    fn name(&self) -> &str {
        "analytic"
    }

    fn flow(&mut self, from: &RgbImage, _to: &RgbImage, pair: PairIndex) -> Result<FlowField, FlowError> {
        let f = &mut self.f;
        Ok(FlowField::from_fn(from.height(), from.width(), |x, y| f(pair, x, y)))
    }
}

/// Backend that always answers zero flow.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroFlow;

impl FlowBackend for ZeroFlow {
    fn name(&self) -> &str {
        "zero"
    }

    fn flow(&mut self, from: &RgbImage, _to: &RgbImage, _pair: PairIndex) -> Result<FlowField, FlowError> {
        Ok(FlowField::zeros(from.height(), from.width()))
    }
}
