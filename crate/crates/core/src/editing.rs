//! Propagating canonical-space edits and masks into every frame through the
//! learned deformation.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fields::{FieldError, NarcanModel, PointBatch};
use crate::frames_io::{FrameSequence, RasterCanvas, RgbImage};
use crate::separation::{blend_frames, blend_weight, SegmentModelSet, SeparationError};

#[derive(Debug, Error)]
pub enum EditError {
    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),
    #[error("invalid layer: {0}")]
    InvalidLayer(String),
    #[error("frame {frame}: {:.2}% of samples fall outside the edited canvas", fraction * 100.0)]
    Coverage { frame: usize, fraction: f64 },
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Separation(#[from] SeparationError),
}

type Result<T> = std::result::Result<T, EditError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BlendMode {
    Replace,
    #[default]
    AlphaOver,
}

/// An RGBA overlay in canonical space.
#[derive(Debug, Clone, PartialEq)]
pub struct EditLayer {
    canvas: RasterCanvas,
    pub mode: BlendMode,
}

impl EditLayer {
    pub fn new(canvas: RasterCanvas, mode: BlendMode) -> Result<Self> {
        if canvas.channels() != 4 {
            return Err(EditError::InvalidLayer(format!("edit layer needs RGBA, got {} channels", canvas.channels())));
        }
        if canvas.pixels().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(EditError::InvalidLayer("edit values must lie in [0, 1]".into()));
        }
        Ok(Self { canvas, mode })
    }

    pub fn canvas(&self) -> &RasterCanvas {
        &self.canvas
    }
}

/// A binary single-channel mask in canonical space.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskLayer {
    canvas: RasterCanvas,
}

impl MaskLayer {
    /// Binarizes at 0.5.
    pub fn new(canvas: RasterCanvas) -> Result<Self> {
        if canvas.channels() != 1 {
            return Err(EditError::InvalidLayer(format!("mask needs one channel, got {}", canvas.channels())));
        }
        let pixels = canvas.pixels().mapv(|v| if v >= 0.5 { 1.0 } else { 0.0 });
        Ok(Self {
            canvas: RasterCanvas::new(pixels, canvas.origin(), canvas.scale()).expect("binary mask"),
        })
    }

    pub fn canvas(&self) -> &RasterCanvas {
        &self.canvas
    }
}

/// Applies `edit` to a 3- or 4-channel `base` of the same geometry.
/// `alpha_over` mixes by alpha; `replace` takes edit colors wherever alpha
/// is positive. A 4-channel base keeps its own alpha.
pub fn composite_edit(base: &RasterCanvas, edit: &EditLayer) -> Result<RasterCanvas> {
    if !base.same_geometry(&edit.canvas) {
        return Err(EditError::GeometryMismatch(format!("base {:?} vs edit {:?}", base.spec(), edit.canvas.spec())));
    }
    if base.channels() < 3 {
        return Err(EditError::InvalidLayer("base must have color channels".into()));
    }
    let mut out = base.pixels().clone();
    let ep = edit.canvas.pixels();
    for y in 0..base.height() {
        for x in 0..base.width() {
            let a = ep[[y, x, 3]];
            for c in 0..3 {
                out[[y, x, c]] = match edit.mode {
                    BlendMode::AlphaOver if a == 0.0 => out[[y, x, c]],
                    BlendMode::AlphaOver => a * ep[[y, x, c]] + (1.0 - a) * out[[y, x, c]],
                    BlendMode::Replace if a > 0.0 => ep[[y, x, c]],
                    BlendMode::Replace => out[[y, x, c]],
                };
            }
        }
    }
    Ok(RasterCanvas::new(out, base.origin(), base.scale()).expect("composite of valid canvases"))
}

fn coverage_error(frame: usize, outside: usize, total: usize) -> EditError {
    EditError::Coverage {
        frame,
        fraction: outside as f64 / total as f64,
    }
}

/// Frame `t` of `model` with the canonical network replaced by a raster
/// lookup. An RGB raster replaces colors outright; an RGBA raster is
/// composited over the network's colors, so alpha-0 pixels match
/// [`NarcanModel::render_frame`] exactly.
pub fn render_frame_with_canvas(model: &NarcanModel, canvas: &RasterCanvas, t: usize) -> Result<RgbImage> {
    let (h, w) = (model.height(), model.width());
    let coords = model.deform_batch(&PointBatch::frame_pixels(t, h, w))?;
    let channels = canvas.channels();
    if channels != 3 && channels != 4 {
        return Err(EditError::InvalidLayer(format!("edited canonical needs RGB or RGBA, got {channels} channels")));
    }
    let mut samples = Array2::<f64>::zeros((h * w, channels));
    let mut outside = 0;
    let mut buf = vec![0.0; channels];
    for i in 0..h * w {
        if canvas.sample_bilinear(coords[[i, 0]], coords[[i, 1]], &mut buf) {
            for c in 0..channels {
                samples[[i, c]] = buf[c];
            }
        } else {
            outside += 1;
        }
    }
    if outside > 0 {
        return Err(coverage_error(t, outside, h * w));
    }
    let base = if channels == 4 { Some(model.canonical.eval_batch(&coords)) } else { None };
    let pixels = Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        let i = y * w + x;
        match &base {
            None => samples[[i, c]],
            Some(rgb) => {
                let a = samples[[i, 3]];
                if a == 0.0 {
                    rgb[[i, c]]
                } else {
                    a * samples[[i, c]] + (1.0 - a) * rgb[[i, c]]
                }
            }
        }
    });
    Ok(RgbImage::new(pixels.mapv(|v| v.clamp(0.0, 1.0))).expect("colors in range"))
}

fn check_edit_count(set: &SegmentModelSet, n: usize) -> Result<()> {
    if n != set.plan.k {
        return Err(EditError::GeometryMismatch(format!("{n} edited canvases for {} segments", set.plan.k)));
    }
    Ok(())
}

/// Renders every frame from edited canvases, one per segment, compositing
/// per segment before blending.
pub fn render_edited_video(set: &SegmentModelSet, edited: &[RasterCanvas]) -> Result<FrameSequence> {
    check_edit_count(set, edited.len())?;
    let mut frames = Vec::with_capacity(set.frame_count());
    for t in 0..set.frame_count() {
        let frame = blend_frames(set, t, |i, local| {
            render_frame_with_canvas(&set.models[i], &edited[i], local).map_err(|e| match e {
                EditError::Coverage { fraction, .. } => EditError::Coverage { frame: t, fraction },
                other => other,
            })
        })?;
        frames.push(frame);
    }
    Ok(FrameSequence::new(frames).expect("renders share one size"))
}

/// Mask of frame `t` by nearest-neighbor lookup of the mask canvas.
pub fn propagate_mask_frame(model: &NarcanModel, mask: &MaskLayer, t: usize) -> Result<Array2<bool>> {
    let (h, w) = (model.height(), model.width());
    let coords = model.deform_batch(&PointBatch::frame_pixels(t, h, w))?;
    let mut out = Array2::from_elem((h, w), false);
    let mut outside = 0;
    let mut buf = [0.0];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if mask.canvas.sample_nearest(coords[[i, 0]], coords[[i, 1]], &mut buf) {
                out[[y, x]] = buf[0] >= 0.5;
            } else {
                outside += 1;
            }
        }
    }
    if outside > 0 {
        return Err(coverage_error(t, outside, h * w));
    }
    Ok(out)
}

/// Per-frame masks from one mask per segment. Inside overlap windows the
/// segment with the larger blend weight decides, the earlier one on ties.
pub fn propagate_mask(set: &SegmentModelSet, masks: &[MaskLayer]) -> Result<Vec<Array2<bool>>> {
    check_edit_count(set, masks.len())?;
    (0..set.frame_count())
        .map(|t| {
            let weights = blend_weight(&set.plan, t)?;
            let (seg, _) = weights
                .iter()
                .copied()
                .fold((weights[0].0, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });
            propagate_mask_frame(&set.models[seg], &masks[seg], set.local_frame(seg, t)).map_err(|e| match e {
                EditError::Coverage { fraction, .. } => EditError::Coverage { frame: t, fraction },
                other => other,
            })
        })
        .collect()
}

/// Intersection over union of two binary masks; 1 when both are empty.
pub fn mask_iou(a: &Array2<bool>, b: &Array2<bool>) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::FieldConfig;
    use crate::frames_io::CanvasSpec;

    fn spec(n: usize) -> CanvasSpec {
        CanvasSpec {
            origin_u: 0.5 / n as f64,
            origin_v: 0.5 / n as f64,
            scale: 1.0 / n as f64,
            height: n,
            width: n,
        }
    }

    fn rgba(n: usize, f: impl Fn(usize, usize) -> [f64; 4]) -> RasterCanvas {
        RasterCanvas::from_spec(&spec(n), Array3::from_shape_fn((n, n, 4), |(y, x, c)| f(x, y)[c])).unwrap()
    }

    #[test]
    fn composite_examples() {
        let base = RasterCanvas::filled(&spec(4), &[0.0, 0.0, 0.0]).unwrap();
        let clear = EditLayer::new(rgba(4, |_, _| [1.0, 1.0, 1.0, 0.0]), BlendMode::AlphaOver).unwrap();
        assert_eq!(composite_edit(&base, &clear).unwrap(), base);
        let opaque = EditLayer::new(rgba(4, |_, _| [0.2, 0.4, 0.6, 1.0]), BlendMode::AlphaOver).unwrap();
        assert!(composite_edit(&base, &opaque).unwrap().pixels().slice(ndarray::s![.., .., 2]).iter().all(|v| *v == 0.6));
        let half = EditLayer::new(rgba(4, |_, _| [1.0, 1.0, 1.0, 0.5]), BlendMode::AlphaOver).unwrap();
        assert!(composite_edit(&base, &half).unwrap().pixels().iter().all(|v| *v == 0.5));
        let replace = EditLayer::new(rgba(4, |_, _| [1.0, 1.0, 1.0, 0.5]), BlendMode::Replace).unwrap();
        assert!(composite_edit(&base, &replace).unwrap().pixels().iter().all(|v| *v == 1.0));
        let other = RasterCanvas::filled(&spec(5), &[0.0; 3]).unwrap();
        assert!(matches!(composite_edit(&other, &half), Err(EditError::GeometryMismatch(_))));
    }

    fn identity_model(frames: usize, n: usize) -> NarcanModel {
        let cfg = FieldConfig {
            pe_freqs_spatial: 1,
            pe_freqs_time: 1,
            pe_freqs_canonical: 2,
            layers_g: vec![4],
            layers_f: vec![6],
        };
        NarcanModel::new(frames, n, n, &cfg, 3)
    }

    #[test]
    fn identity_model_reproduces_square_every_frame() {
        let n = 20;
        let model = identity_model(3, n);
        let edit = rgba(n, |x, y| {
            let inside = (8..12).contains(&x) && (8..12).contains(&y);
            if inside {
                [1.0, 0.0, 0.0, 1.0]
            } else {
                [0.0, 0.0, 0.0, 0.0]
            }
        });
        let set = SegmentModelSet::single(model.clone());
        let video = render_edited_video(&set, &[edit]).unwrap();
        for t in 0..3 {
            let reference = model.render_frame(t).unwrap();
            for y in 0..n {
                for x in 0..n {
                    let got = video.frame(t).get(x, y);
                    if (8..12).contains(&x) && (8..12).contains(&y) {
                        assert!((got[0] - 1.0).abs() < 1e-9 && got[1].abs() < 1e-9 && got[2].abs() < 1e-9);
                    } else if !((7..13).contains(&x) && (7..13).contains(&y)) {
                        // alpha 0 keeps the network colors bit for bit
                        assert_eq!(got, reference.get(x, y));
                    }
                }
            }
        }
    }

    #[test]
    fn coverage_error_names_frame() {
        let model = identity_model(2, 10);
        let small = RasterCanvas::filled(
            &CanvasSpec {
                origin_u: 0.3,
                origin_v: 0.3,
                scale: 0.05,
                height: 5,
                width: 5,
            },
            &[0.5; 3],
        )
        .unwrap();
        match render_edited_video(&SegmentModelSet::single(model), &[small]) {
            Err(EditError::Coverage { frame, fraction }) => {
                assert_eq!(frame, 0);
                assert!(fraction > 0.5);
            }
            other => panic!("expected coverage error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn all_ones_mask_propagates_everywhere() {
        let n = 12;
        let model = identity_model(2, n);
        let mask = MaskLayer::new(RasterCanvas::filled(&spec(n), &[1.0]).unwrap()).unwrap();
        let masks = propagate_mask(&SegmentModelSet::single(model), &[mask]).unwrap();
        assert!(masks.iter().all(|m| m.iter().all(|v| *v)));
    }

    #[test]
    fn iou_examples() {
        let a = Array2::from_shape_fn((4, 4), |(y, _)| y < 2);
        let b = Array2::from_shape_fn((4, 4), |(y, _)| y < 1);
        assert_eq!(mask_iou(&a, &a), 1.0);
        assert_eq!(mask_iou(&a, &b), 0.5);
    }
}
