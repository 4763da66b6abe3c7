//! Long videos as k overlapping segments, each with its own model and
//! canonical image. Renders inside an overlap window are linear blends of
//! the two segment renders; edits move between canonical images through
//! a 2×2 grid layout or dense flow.

pub mod flow;

use std::fs;
use std::path::Path;

use ndarray::{Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fields::checkpoint::{load_model, read_manifest, save_model, segment_dir, segment_dir_name, MANIFEST_FILE};
use crate::fields::{FieldError, NarcanModel};
use crate::frames_io::{atomic_write, FrameSequence, RasterCanvas, RgbImage};
use crate::prior::PriorProvider;
use crate::training::{train, PriorSchedule, TrainConfig, TrainError, TrainReport};

pub use flow::{backward_warp, flow_between, AnalyticFlow, BlockMatching, FlowBackend, FlowError, FlowField, PairIndex, ZeroFlow};

#[derive(Debug, Error)]
pub enum SeparationError {
    #[error("infeasible segment plan: {0}")]
    InfeasiblePlan(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("frame {t} is outside the plan's {frame_count} frames")]
    FrameOutOfRange { t: usize, frame_count: usize },
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Field(#[from] FieldError),
}

/// Segment ranges `[start, end)` covering `[0, T)`; neighbors share
/// `overlap` frames.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentPlan {
    pub k: usize,
    pub overlap: usize,
    pub segments: Vec<(usize, usize)>,
}

impl SegmentPlan {
    pub fn frame_count(&self) -> usize {
        self.segments.last().map_or(0, |s| s.1)
    }

    pub fn segment_len(&self, i: usize) -> usize {
        self.segments[i].1 - self.segments[i].0
    }

    /// Checks coverage, overlaps, and `overlap < min segment length`.
    pub fn validate(&self) -> Result<(), SeparationError> {
        let bad = |m: String| Err(SeparationError::InfeasiblePlan(m));
        if self.k == 0 || self.segments.len() != self.k {
            return bad(format!("{} segments for k = {}", self.segments.len(), self.k));
        }
        if self.segments[0].0 != 0 {
            return bad("first segment must start at frame 0".into());
        }
        for (i, &(s, e)) in self.segments.iter().enumerate() {
            if e <= s + 1 {
                return bad(format!("segment {i} ({s}, {e}) has fewer than 2 frames"));
            }
            if self.k > 1 && e - s <= self.overlap {
                return bad(format!("segment {i} is not longer than the overlap {}", self.overlap));
            }
        }
        for (i, w) in self.segments.windows(2).enumerate() {
            if w[0].1 < w[1].0 || w[0].1 - w[1].0 != self.overlap {
                return bad(format!("segments {i} and {} do not overlap by {}", i + 1, self.overlap));
            }
        }
        Ok(())
    }
}

/// Equal-length segments solving `k·L − (k−1)·W = T`, the remainder going
/// to the last segment.
pub fn plan_segments(frame_count: usize, k: usize, overlap: usize) -> Result<SegmentPlan, SeparationError> {
    if k == 0 {
        return Err(SeparationError::InfeasiblePlan("k must be >= 1".into()));
    }
    if k == 1 {
        let plan = SegmentPlan {
            k,
            overlap: 0,
            segments: vec![(0, frame_count)],
        };
        plan.validate()?;
        return Ok(plan);
    }
    let len = (frame_count + (k - 1) * overlap) / k;
    if len <= overlap || len < 2 {
        return Err(SeparationError::InfeasiblePlan(format!(
            "{frame_count} frames in {k} segments gives length {len}, not longer than the overlap {overlap}"
        )));
    }
    let stride = len - overlap;
    let mut segments: Vec<(usize, usize)> = (0..k).map(|i| (i * stride, i * stride + len)).collect();
    segments[k - 1].1 = frame_count;
    let plan = SegmentPlan { k, overlap, segments };
    plan.validate()?;
    Ok(plan)
}

/// Blend weights for frame `t`: one `(segment, 1.0)` outside overlaps, two
/// linearly shifting weights inside one.
pub fn blend_weight(plan: &SegmentPlan, t: usize) -> Result<Vec<(usize, f64)>, SeparationError> {
    let frame_count = plan.frame_count();
    if t >= frame_count {
        return Err(SeparationError::FrameOutOfRange { t, frame_count });
    }
    let covering: Vec<usize> = (0..plan.k).filter(|&i| plan.segments[i].0 <= t && t < plan.segments[i].1).collect();
    Ok(match covering[..] {
        [i] => vec![(i, 1.0)],
        [i, j] => {
            let p = t - plan.segments[j].0;
            let alpha = if plan.overlap > 1 { p as f64 / (plan.overlap - 1) as f64 } else { 0.0 };
            vec![(i, 1.0 - alpha), (j, alpha)]
        }
        _ => unreachable!("validated plans cover each frame once or twice"),
    })
}

/// One model per planned segment.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentModelSet {
    pub plan: SegmentPlan,
    pub models: Vec<NarcanModel>,
}

impl SegmentModelSet {
    pub fn new(plan: SegmentPlan, models: Vec<NarcanModel>) -> Result<Self, SeparationError> {
        plan.validate()?;
        if models.len() != plan.k {
            return Err(SeparationError::DimensionMismatch(format!("{} models for {} segments", models.len(), plan.k)));
        }
        for (i, m) in models.iter().enumerate() {
            if m.frame_count() != plan.segment_len(i) {
                return Err(SeparationError::DimensionMismatch(format!(
                    "model {i} has {} frames, segment has {}",
                    m.frame_count(),
                    plan.segment_len(i)
                )));
            }
            if (m.height(), m.width()) != (models[0].height(), models[0].width()) {
                return Err(SeparationError::DimensionMismatch("segment models differ in frame size".into()));
            }
        }
        Ok(Self { plan, models })
    }

    pub fn single(model: NarcanModel) -> Self {
        let plan = SegmentPlan {
            k: 1,
            overlap: 0,
            segments: vec![(0, model.frame_count())],
        };
        Self { plan, models: vec![model] }
    }

    pub fn frame_count(&self) -> usize {
        self.plan.frame_count()
    }

    pub fn height(&self) -> usize {
        self.models[0].height()
    }

    pub fn width(&self) -> usize {
        self.models[0].width()
    }

    /// Frame index of global frame `t` inside segment `i`.
    pub fn local_frame(&self, i: usize, t: usize) -> usize {
        t - self.plan.segments[i].0
    }
}

/// Convex combination of segment renders at frame `t`, built by `render`
/// from `(segment, local frame)`. Weight-1 frames are returned as rendered.
pub fn blend_frames<E: From<SeparationError>>(
    set: &SegmentModelSet,
    t: usize,
    mut render: impl FnMut(usize, usize) -> Result<RgbImage, E>,
) -> Result<RgbImage, E> {
    let weights: Vec<(usize, f64)> = blend_weight(&set.plan, t)?.into_iter().filter(|&(_, a)| a > 0.0).collect();
    if let [(i, _)] = weights[..] {
        return render(i, set.local_frame(i, t));
    }
    let mut acc = Array3::<f64>::zeros((set.height(), set.width(), 3));
    for (i, a) in weights {
        let img = render(i, set.local_frame(i, t))?;
        acc.scaled_add(a, img.pixels());
    }
    Ok(RgbImage::new(acc.mapv(|v| v.clamp(0.0, 1.0))).expect("convex combination of valid frames"))
}

pub fn render_blended(set: &SegmentModelSet, t: usize) -> Result<RgbImage, SeparationError> {
    blend_frames(set, t, |i, local| Ok::<_, SeparationError>(set.models[i].render_frame(local)?))
}

pub fn render_sequence(set: &SegmentModelSet) -> Result<FrameSequence, SeparationError> {
    let frames = (0..set.frame_count())
        .map(|t| render_blended(set, t))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(FrameSequence::new(frames).expect("renders share one size"))
}

/// Trains one model per planned segment. Segment `i` uses seed `seed + i`.
pub fn train_segments(
    seq: &FrameSequence,
    plan: &SegmentPlan,
    cfg: &TrainConfig,
    schedule: &PriorSchedule,
    mut provider: Option<&mut dyn PriorProvider>,
) -> Result<(SegmentModelSet, Vec<TrainReport>), TrainError> {
    plan.validate().map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
    if plan.frame_count() != seq.len() {
        return Err(TrainError::InvalidConfig(format!(
            "plan covers {} frames but the video has {}",
            plan.frame_count(),
            seq.len()
        )));
    }
    let mut models = Vec::with_capacity(plan.k);
    let mut reports = Vec::with_capacity(plan.k);
    for (i, &(start, end)) in plan.segments.iter().enumerate() {
        let part = seq.slice(start, end).map_err(FieldError::from)?;
        let seg_cfg = TrainConfig {
            seed: cfg.seed.wrapping_add(i as u64),
            ..cfg.clone()
        };
        let (model, report) = train(&part, &seg_cfg, schedule, provider.as_mut().map(|p| &mut **p as &mut dyn PriorProvider))?;
        models.push(model);
        reports.push(report);
    }
    let set = SegmentModelSet::new(plan.clone(), models).map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
    Ok((set, reports))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SetManifest {
    plan: SegmentPlan,
    segments: Vec<String>,
    #[serde(flatten)]
    extra: serde_json::Map<String, serde_json::Value>,
}

/// Saves a single-segment set as a plain model checkpoint (plan in the
/// manifest) and a multi-segment set as one subdirectory per segment under
/// a root manifest.
pub fn save_model_set(
    set: &SegmentModelSet,
    dir: &Path,
    extra: serde_json::Map<String, serde_json::Value>,
) -> Result<(), SeparationError> {
    let plan_json = serde_json::to_value(&set.plan).expect("plan serializes");
    if set.plan.k == 1 {
        let mut extra = extra;
        extra.insert("plan".into(), plan_json);
        save_model(&set.models[0], dir, extra)?;
        return Ok(());
    }
    fs::create_dir_all(dir).map_err(|e| FieldError::Checkpoint {
        path: dir.to_path_buf(),
        reason: e.to_string(),
    })?;
    for (i, model) in set.models.iter().enumerate() {
        let mut seg_extra = serde_json::Map::new();
        seg_extra.insert("segment".into(), i.into());
        seg_extra.insert("frames".into(), serde_json::to_value(set.plan.segments[i]).expect("pair serializes"));
        save_model(model, &segment_dir(dir, i), seg_extra)?;
    }
    let manifest = SetManifest {
        plan: set.plan.clone(),
        segments: (0..set.plan.k).map(segment_dir_name).collect(),
        extra,
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    atomic_write(&dir.join(MANIFEST_FILE), &json).map_err(FieldError::from)?;
    Ok(())
}

pub fn load_model_set(dir: &Path) -> Result<SegmentModelSet, SeparationError> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(|e| FieldError::Checkpoint {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    let ckpt_err = |reason: String| FieldError::Checkpoint { path: path.clone(), reason };
    let value: serde_json::Value = serde_json::from_slice(&bytes).map_err(|e| ckpt_err(e.to_string()))?;
    if value.get("segments").is_some() {
        let manifest: SetManifest = serde_json::from_value(value).map_err(|e| ckpt_err(e.to_string()))?;
        let models = manifest
            .segments
            .iter()
            .map(|name| load_model(&dir.join(name)).map(|(m, _)| m))
            .collect::<Result<Vec<_>, _>>()?;
        return SegmentModelSet::new(manifest.plan, models);
    }
    read_manifest(dir)?;
    let (model, manifest) = load_model(dir)?;
    match manifest.extra.get("plan") {
        Some(plan) => {
            let plan: SegmentPlan = serde_json::from_value(plan.clone()).map_err(|e| ckpt_err(e.to_string()))?;
            SegmentModelSet::new(plan, vec![model])
        }
        None => Ok(SegmentModelSet::single(model)),
    }
}

/// Where each canonical image sits inside a 2×2 grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub segment: usize,
    pub row: usize,
    pub col: usize,
    pub origin_u: f64,
    pub origin_v: f64,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridManifest {
    pub cell_height: usize,
    pub cell_width: usize,
    pub channels: usize,
    pub cells: Vec<GridCell>,
}

pub const GRID_CELLS: usize = 4;

/// Tiles up to four same-size canvases row-major into a 2×2 grid; unused
/// cells stay black. The grid raster takes the first cell's geometry.
pub fn grid_concat(canvases: &[RasterCanvas]) -> Result<(RasterCanvas, GridManifest), SeparationError> {
    let Some(first) = canvases.first() else {
        return Err(SeparationError::DimensionMismatch("no canvases to tile".into()));
    };
    if canvases.len() > GRID_CELLS {
        return Err(SeparationError::DimensionMismatch(format!(
            "{} canvases exceed the {GRID_CELLS} cells of one grid",
            canvases.len()
        )));
    }
    let (h, w, c) = first.pixels().dim();
    let mut pixels = Array3::zeros((2 * h, 2 * w, c));
    let mut cells = Vec::with_capacity(canvases.len());
    for (i, canvas) in canvases.iter().enumerate() {
        if canvas.pixels().dim() != (h, w, c) {
            return Err(SeparationError::DimensionMismatch(format!(
                "canvas {i} is {:?}, expected {:?}",
                canvas.pixels().dim(),
                (h, w, c)
            )));
        }
        let (row, col) = (i / 2, i % 2);
        pixels
            .slice_mut(ndarray::s![row * h..(row + 1) * h, col * w..(col + 1) * w, ..])
            .assign(canvas.pixels());
        cells.push(GridCell {
            segment: i,
            row,
            col,
            origin_u: canvas.origin().0,
            origin_v: canvas.origin().1,
            scale: canvas.scale(),
        });
    }
    let grid = RasterCanvas::new(pixels, first.origin(), first.scale()).expect("tiles of valid canvases");
    Ok((
        grid,
        GridManifest {
            cell_height: h,
            cell_width: w,
            channels: c,
            cells,
        },
    ))
}

/// Cuts a (possibly edited) grid back into its cells. The grid may have a
/// different channel count than the originals, e.g. RGBA edits.
pub fn grid_split(grid: &RasterCanvas, manifest: &GridManifest) -> Result<Vec<RasterCanvas>, SeparationError> {
    let (h, w) = (manifest.cell_height, manifest.cell_width);
    if grid.height() != 2 * h || grid.width() != 2 * w {
        return Err(SeparationError::DimensionMismatch(format!(
            "grid is {}x{}, manifest expects {}x{}",
            grid.width(),
            grid.height(),
            2 * w,
            2 * h
        )));
    }
    Ok(manifest
        .cells
        .iter()
        .map(|cell| {
            let pixels = grid
                .pixels()
                .slice(ndarray::s![cell.row * h..(cell.row + 1) * h, cell.col * w..(cell.col + 1) * w, ..])
                .to_owned();
            RasterCanvas::new(pixels, (cell.origin_u, cell.origin_v), cell.scale).expect("cell of a valid grid")
        })
        .collect())
}

/// Backward-warps an RGBA edit layer by `flow`, defined on the output grid.
/// Pixels with invalid flow or landing outside the edit get alpha 0.
pub fn warp_edit(edit: &RasterCanvas, flow: &FlowField) -> Result<RasterCanvas, SeparationError> {
    if edit.channels() != 4 {
        return Err(SeparationError::DimensionMismatch(format!("edit has {} channels, expected RGBA", edit.channels())));
    }
    let (mut pixels, mask) = backward_warp(edit.pixels().view(), flow)?;
    for ((y, x), ok) in mask.indexed_iter() {
        if !ok {
            pixels.slice_mut(ndarray::s![y, x, ..]).fill(0.0);
        }
    }
    Ok(RasterCanvas::new(pixels, edit.origin(), edit.scale()).expect("warp of a valid edit"))
}

/// Mean alignment error after chaining `n = 1..=steps` warps whose flows
/// should be zero but carry Gaussian jitter of `sigma_px` pixels per step,
/// averaged over `trials` seeded runs. Error is the mean absolute
/// premultiplied-color difference to the unwarped edit over interior pixels.
pub fn cumulative_warp_errors(edit: &RasterCanvas, steps: usize, sigma_px: f64, trials: usize, seed: u64) -> Result<Vec<f64>, SeparationError> {
    if edit.channels() != 4 {
        return Err(SeparationError::DimensionMismatch("cumulative warp check needs an RGBA edit".into()));
    }
    let (h, w) = (edit.height(), edit.width());
    let margin = (h.min(w) / 4).max(1);
    let noise = Normal::new(0.0, sigma_px).map_err(|e| SeparationError::InfeasiblePlan(e.to_string()))?;
    let premul = |p: &Array3<f64>| {
        let alpha = p.index_axis(Axis(2), 3).to_owned();
        let mut out = p.slice(ndarray::s![.., .., 0..3]).to_owned();
        for c in 0..3 {
            let mut ch = out.index_axis_mut(Axis(2), c);
            ch *= &alpha;
        }
        out
    };
    let reference = premul(edit.pixels());
    let mut totals = vec![0.0; steps];
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(trial as u64));
        let mut current = edit.clone();
        for total in totals.iter_mut() {
            let (dx, dy) = (noise.sample(&mut rng), noise.sample(&mut rng));
            let flow = FlowField::uniform(h, w, dx / w as f64, dy / h as f64);
            current = warp_edit(&current, &flow)?;
            let diff = premul(current.pixels()) - &reference;
            let interior = diff.slice(ndarray::s![margin..h - margin, margin..w - margin, ..]);
            *total += interior.mapv(f64::abs).mean().unwrap_or(0.0);
        }
    }
    Ok(totals.into_iter().map(|t| t / trials.max(1) as f64).collect())
}
