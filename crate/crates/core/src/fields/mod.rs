//! Hybrid deformation field and canonical color field.
//!
//! A frame pixel `(u, v)` at frame `t` maps to the canonical point
//! `(u', v') = H_t(u, v) + g(u, v, t_norm)`, where `H_t` is the frame's
//! projective map and `g` a residual coordinate network. Its color is
//! `f(u', v')`, a coordinate network with a sigmoid output.

pub mod checkpoint;
pub mod encoding;
pub mod homography;
pub mod mlp;

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frames_io::{normalized_time, pixel_center, CanvasSpec, FramesError, RasterCanvas, RgbImage};
use encoding::{InputEncoder, PositionalEncoding};
pub use homography::HomographyTrajectory;
use homography::PointJacobian;
use mlp::{Mlp, MlpGrads, MlpTape};

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("degenerate homography at frame {frame}")]
    DegenerateHomography { frame: usize },
    #[error("frame {frame} out of range for a {frames}-frame model")]
    FrameOutOfRange { frame: usize, frames: usize },
    #[error("invalid parameters: {0}")]
    InvalidParameters(String),
    #[error(transparent)]
    Frames(#[from] FramesError),
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: std::path::PathBuf, reason: String },
}

/// Network and encoding sizes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldConfig {
    pub pe_freqs_spatial: usize,
    pub pe_freqs_time: usize,
    pub pe_freqs_canonical: usize,
    /// Hidden-layer widths of the residual network.
    pub layers_g: Vec<usize>,
    /// Hidden-layer widths of the canonical network.
    pub layers_f: Vec<usize>,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            pe_freqs_spatial: 8,
            pe_freqs_time: 4,
            pe_freqs_canonical: 10,
            layers_g: vec![256; 5],
            layers_f: vec![256; 6],
        }
    }
}

/// Residual displacement network `g(u, v, t_norm) → (Δu, Δv)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualField {
    mlp: Mlp,
    encoder: InputEncoder,
    pe_freqs_spatial: usize,
    pe_freqs_time: usize,
}

impl ResidualField {
    fn encoder(pe_freqs_spatial: usize, pe_freqs_time: usize) -> InputEncoder {
        InputEncoder::new(vec![
            PositionalEncoding::new(pe_freqs_spatial),
            PositionalEncoding::new(pe_freqs_spatial),
            PositionalEncoding::new(pe_freqs_time),
        ])
    }

    /// New field with its output layer zeroed, so `g ≡ 0` at start.
    pub fn new(cfg: &FieldConfig, rng: &mut ChaCha8Rng) -> Self {
        let encoder = Self::encoder(cfg.pe_freqs_spatial, cfg.pe_freqs_time);
        let mut mlp = Mlp::new(encoder.encoded_dim(), &cfg.layers_g, 2, rng);
        mlp.zero_output_layer();
        Self {
            mlp,
            encoder,
            pe_freqs_spatial: cfg.pe_freqs_spatial,
            pe_freqs_time: cfg.pe_freqs_time,
        }
    }

    pub fn from_mlp(mlp: Mlp, pe_freqs_spatial: usize, pe_freqs_time: usize) -> Result<Self, FieldError> {
        let encoder = Self::encoder(pe_freqs_spatial, pe_freqs_time);
        if mlp.input_dim() != encoder.encoded_dim() || mlp.output_dim() != 2 {
            return Err(FieldError::InvalidParameters(format!(
                "residual network is {}→{}, expected {}→2",
                mlp.input_dim(),
                mlp.output_dim(),
                encoder.encoded_dim()
            )));
        }
        Ok(Self {
            mlp,
            encoder,
            pe_freqs_spatial,
            pe_freqs_time,
        })
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp {
        &mut self.mlp
    }

    pub fn pe_freqs_spatial(&self) -> usize {
        self.pe_freqs_spatial
    }

    pub fn pe_freqs_time(&self) -> usize {
        self.pe_freqs_time
    }

    /// True when the output layer is all zeros, i.e. `g ≡ 0`.
    pub fn is_zero(&self) -> bool {
        let last = self.mlp.layers().last().expect("non-empty");
        last.weight.iter().chain(last.bias.iter()).all(|&v| v == 0.0)
    }

    /// `raw` is `n×3` of `(u, v, t_norm)`; returns `n×2` displacements.
    pub fn eval_batch(&self, raw: &Array2<f64>) -> Array2<f64> {
        if self.is_zero() {
            return Array2::zeros((raw.nrows(), 2));
        }
        self.mlp.forward(self.encoder.encode(raw.view()).view())
    }

    pub fn eval(&self, u: f64, v: f64, t_norm: f64) -> (f64, f64) {
        let out = self.eval_batch(&ndarray::arr2(&[[u, v, t_norm]]));
        (out[[0, 0]], out[[0, 1]])
    }
}

/// Canonical color network `f(u', v') → RGB ∈ [0,1]^3`.
#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalField {
    mlp: Mlp,
    encoder: InputEncoder,
    pe_freqs: usize,
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl CanonicalField {
    fn encoder(pe_freqs: usize) -> InputEncoder {
        InputEncoder::new(vec![PositionalEncoding::new(pe_freqs), PositionalEncoding::new(pe_freqs)])
    }

    pub fn new(cfg: &FieldConfig, rng: &mut ChaCha8Rng) -> Self {
        let encoder = Self::encoder(cfg.pe_freqs_canonical);
        let mlp = Mlp::new(encoder.encoded_dim(), &cfg.layers_f, 3, rng);
        Self {
            mlp,
            encoder,
            pe_freqs: cfg.pe_freqs_canonical,
        }
    }

    pub fn from_mlp(mlp: Mlp, pe_freqs: usize) -> Result<Self, FieldError> {
        let encoder = Self::encoder(pe_freqs);
        if mlp.input_dim() != encoder.encoded_dim() || mlp.output_dim() != 3 {
            return Err(FieldError::InvalidParameters(format!(
                "canonical network is {}→{}, expected {}→3",
                mlp.input_dim(),
                mlp.output_dim(),
                encoder.encoded_dim()
            )));
        }
        Ok(Self { mlp, encoder, pe_freqs })
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp {
        &mut self.mlp
    }

    pub fn pe_freqs(&self) -> usize {
        self.pe_freqs
    }

    /// Makes the field output `rgb` everywhere (up to sigmoid saturation).
    pub fn set_constant(&mut self, rgb: [f64; 3]) {
        self.mlp.zero_output_layer();
        let last = self.mlp.layers_mut().last_mut().expect("non-empty");
        for (c, &value) in rgb.iter().enumerate() {
            let p = value.clamp(0.0, 1.0);
            last.bias[c] = if p <= 0.0 {
                -40.0
            } else if p >= 1.0 {
                40.0
            } else {
                (p / (1.0 - p)).ln()
            };
        }
    }

    /// `coords` is `n×2` canonical points; returns `n×3` colors.
    pub fn eval_batch(&self, coords: &Array2<f64>) -> Array2<f64> {
        let mut out = self.mlp.forward(self.encoder.encode(coords.view()).view());
        out.mapv_inplace(sigmoid);
        out
    }

    fn forward_taped(&self, coords: &Array2<f64>) -> (Array2<f64>, MlpTape) {
        let (mut out, tape) = self.mlp.forward_taped(self.encoder.encode(coords.view()));
        out.mapv_inplace(sigmoid);
        (out, tape)
    }

    /// Backward through sigmoid and the network. Returns parameter gradients
    /// and, if requested, the gradient w.r.t. `coords`.
    fn backward(
        &self,
        coords: &Array2<f64>,
        rgb: &Array2<f64>,
        tape: &MlpTape,
        grad_rgb: &Array2<f64>,
        want_coords: bool,
    ) -> (MlpGrads, Option<Array2<f64>>) {
        let mut grad_logits = grad_rgb.clone();
        ndarray::Zip::from(&mut grad_logits).and(rgb).for_each(|g, &s| *g *= s * (1.0 - s));
        let (grads, grad_enc) = self.mlp.backward(tape, grad_logits, want_coords);
        let grad_coords = grad_enc.map(|ge| self.encoder.backward(coords.view(), ge.view()));
        (grads, grad_coords)
    }

    /// Gradient of `Σ grad_rgb · f(coords)` w.r.t. the network parameters.
    pub fn parameter_gradient(&self, coords: &Array2<f64>, grad_rgb_fn: impl FnOnce(&Array2<f64>) -> Array2<f64>) -> (Array2<f64>, MlpGrads) {
        let (rgb, tape) = self.forward_taped(coords);
        let grad = grad_rgb_fn(&rgb);
        let (grads, _) = self.backward(coords, &rgb, &tape, &grad, false);
        (rgb, grads)
    }
}

/// Query points `(frame index, u, v)` for batched evaluation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointBatch {
    pub frames: Vec<usize>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl PointBatch {
    pub fn with_capacity(n: usize) -> Self {
        Self {
            frames: Vec::with_capacity(n),
            u: Vec::with_capacity(n),
            v: Vec::with_capacity(n),
        }
    }

    pub fn push(&mut self, t: usize, u: f64, v: f64) {
        self.frames.push(t);
        self.u.push(u);
        self.v.push(v);
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// All pixel centers of frame `t` in row-major order.
    pub fn frame_pixels(t: usize, height: usize, width: usize) -> Self {
        let mut b = Self::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                b.push(t, pixel_center(x, width), pixel_center(y, height));
            }
        }
        b
    }
}

/// Intermediate values of a taped forward pass.
#[derive(Debug)]
pub struct RenderTape {
    frames: Vec<usize>,
    jacobians: Vec<PointJacobian>,
    residual: Option<(Array2<f64>, MlpTape)>,
    canonical_coords: Array2<f64>,
    canonical_tape: MlpTape,
    rgb: Array2<f64>,
}

impl RenderTape {
    pub fn rgb(&self) -> &Array2<f64> {
        &self.rgb
    }

    pub fn canonical_coords(&self) -> &Array2<f64> {
        &self.canonical_coords
    }
}

/// Parameter gradients of a [`NarcanModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub homography: Array2<f64>,
    pub residual: Option<MlpGrads>,
    pub canonical: MlpGrads,
}

/// A video representation: per-frame homographies, residual field, and
/// canonical field.
#[derive(Debug, Clone, PartialEq)]
pub struct NarcanModel {
    pub homography: HomographyTrajectory,
    pub residual: ResidualField,
    pub canonical: CanonicalField,
    height: usize,
    width: usize,
}

/// Samples per frame used by [`NarcanModel::canonical_bounds`].
pub const BOUNDARY_SAMPLES: usize = 65;

impl NarcanModel {
    /// Identity homographies, zero residual, randomly initialized canonical.
    pub fn new(frame_count: usize, height: usize, width: usize, cfg: &FieldConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let canonical = CanonicalField::new(cfg, &mut rng);
        let residual = ResidualField::new(cfg, &mut rng);
        Self {
            homography: HomographyTrajectory::identity(frame_count),
            residual,
            canonical,
            height,
            width,
        }
    }

    pub fn from_parts(
        homography: HomographyTrajectory,
        residual: ResidualField,
        canonical: CanonicalField,
        height: usize,
        width: usize,
    ) -> Result<Self, FieldError> {
        if homography.is_empty() {
            return Err(FieldError::InvalidParameters("model needs at least one frame".into()));
        }
        Ok(Self {
            homography,
            residual,
            canonical,
            height,
            width,
        })
    }

    pub fn frame_count(&self) -> usize {
        self.homography.len()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn field_config(&self) -> FieldConfig {
        FieldConfig {
            pe_freqs_spatial: self.residual.pe_freqs_spatial(),
            pe_freqs_time: self.residual.pe_freqs_time(),
            pe_freqs_canonical: self.canonical.pe_freqs(),
            layers_g: self.residual.mlp().hidden_widths(),
            layers_f: self.canonical.mlp().hidden_widths(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.homography.params().iter().all(|v| v.is_finite()) && self.residual.mlp().is_finite() && self.canonical.mlp().is_finite()
    }

    fn check_frame(&self, t: usize) -> Result<(), FieldError> {
        if t >= self.frame_count() {
            return Err(FieldError::FrameOutOfRange {
                frame: t,
                frames: self.frame_count(),
            });
        }
        Ok(())
    }

    pub fn apply_homography(&self, u: f64, v: f64, t: usize) -> Result<(f64, f64), FieldError> {
        self.homography.apply(u, v, t)
    }

    /// Canonical position of frame point `(u, v)` at frame `t`.
    pub fn deform(&self, u: f64, v: f64, t: usize) -> Result<(f64, f64), FieldError> {
        self.check_frame(t)?;
        let (hu, hv) = self.homography.apply(u, v, t)?;
        let (du, dv) = self.residual.eval(u, v, normalized_time(t, self.frame_count()));
        Ok((hu + du, hv + dv))
    }

    fn residual_input(&self, batch: &PointBatch) -> Array2<f64> {
        let n = batch.len();
        let frames = self.frame_count();
        Array2::from_shape_fn((n, 3), |(i, j)| match j {
            0 => batch.u[i],
            1 => batch.v[i],
            _ => normalized_time(batch.frames[i], frames),
        })
    }

    /// Canonical positions (`n×2`) of a batch of frame points.
    pub fn deform_batch(&self, batch: &PointBatch) -> Result<Array2<f64>, FieldError> {
        let mut coords = Array2::zeros((batch.len(), 2));
        for i in 0..batch.len() {
            self.check_frame(batch.frames[i])?;
            let (hu, hv) = self.homography.apply(batch.u[i], batch.v[i], batch.frames[i])?;
            coords[[i, 0]] = hu;
            coords[[i, 1]] = hv;
        }
        if !self.residual.is_zero() {
            coords += &self.residual.eval_batch(&self.residual_input(batch));
        }
        Ok(coords)
    }

    /// Colors (`n×3`) of a batch of frame points.
    pub fn render_points(&self, batch: &PointBatch) -> Result<Array2<f64>, FieldError> {
        Ok(self.canonical.eval_batch(&self.deform_batch(batch)?))
    }

    /// Taped forward pass for training. With `with_residual = false` the
    /// residual network is skipped entirely (treated as frozen zero).
    pub fn forward_taped(&self, batch: &PointBatch, with_residual: bool) -> Result<RenderTape, FieldError> {
        let n = batch.len();
        let mut coords = Array2::zeros((n, 2));
        let mut jacobians = Vec::with_capacity(n);
        for i in 0..n {
            let t = batch.frames[i];
            self.check_frame(t)?;
            let ((hu, hv), jac) = self.homography.apply_with_jacobian(batch.u[i], batch.v[i], t)?;
            coords[[i, 0]] = hu;
            coords[[i, 1]] = hv;
            jacobians.push(jac);
        }
        let residual = if with_residual {
            let raw = self.residual_input(batch);
            let enc = self.residual.encoder.encode(raw.view());
            let (disp, tape) = self.residual.mlp.forward_taped(enc);
            coords += &disp;
            Some((raw, tape))
        } else {
            None
        };
        let (rgb, canonical_tape) = self.canonical.forward_taped(&coords);
        Ok(RenderTape {
            frames: batch.frames.clone(),
            jacobians,
            residual,
            canonical_coords: coords,
            canonical_tape,
            rgb,
        })
    }

    /// Gradients of `Σ grad_rgb · rgb` for a taped pass.
    pub fn backward(&self, tape: &RenderTape, grad_rgb: &Array2<f64>) -> ModelGrads {
        let (canonical, grad_coords) =
            self.canonical
                .backward(&tape.canonical_coords, &tape.rgb, &tape.canonical_tape, grad_rgb, true);
        let grad_coords = grad_coords.expect("coordinate gradient requested");

        let mut homography = Array2::zeros((self.frame_count(), 8));
        for (i, jac) in tape.jacobians.iter().enumerate() {
            let (gu, gv) = (grad_coords[[i, 0]], grad_coords[[i, 1]]);
            let mut row = homography.row_mut(tape.frames[i]);
            for k in 0..8 {
                row[k] += gu * jac[0][k] + gv * jac[1][k];
            }
        }

        let residual = tape.residual.as_ref().map(|(_, rtape)| {
            let (grads, _) = self.residual.mlp.backward(rtape, grad_coords.clone(), false);
            grads
        });
        ModelGrads {
            homography,
            residual,
            canonical,
        }
    }

    /// Renders frame `t` at the model's resolution.
    pub fn render_frame(&self, t: usize) -> Result<RgbImage, FieldError> {
        self.check_frame(t)?;
        let (h, w) = (self.height, self.width);
        let batch = PointBatch::frame_pixels(t, h, w);
        let rgb = self.render_points(&batch)?;
        let pixels = rgb.into_shape_with_order((h, w, 3)).expect("pixel count");
        Ok(RgbImage::new(pixels)?)
    }

    /// Samples the canonical field on the grid given by `spec`.
    pub fn render_canonical_raster(&self, spec: &CanvasSpec) -> Result<RasterCanvas, FieldError> {
        spec.validate()?;
        let coords = canvas_coords(spec);
        let rgb = self.canonical.eval_batch(&coords);
        let pixels: Array3<f64> = rgb.into_shape_with_order((spec.height, spec.width, 3)).expect("pixel count");
        Ok(RasterCanvas::from_spec(spec, pixels)?)
    }

    /// Bounding box `(u_min, v_min, u_max, v_max)` of the deformed frame
    /// boundaries over all frames, grown by `margin` on each side.
    pub fn canonical_bounds(&self, margin: f64) -> Result<(f64, f64, f64, f64), FieldError> {
        if !(margin >= 0.0) {
            return Err(FieldError::InvalidParameters(format!("margin must be >= 0, got {margin}")));
        }
        let ring = boundary_ring(self.height, self.width);
        let mut batch = PointBatch::with_capacity(ring.len() * self.frame_count());
        for t in 0..self.frame_count() {
            for &(u, v) in &ring {
                batch.push(t, u, v);
            }
        }
        let coords = self.deform_batch(&batch)?;
        let mut b = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for row in coords.outer_iter() {
            b.0 = b.0.min(row[0]);
            b.1 = b.1.min(row[1]);
            b.2 = b.2.max(row[0]);
            b.3 = b.3.max(row[1]);
        }
        Ok((b.0 - margin, b.1 - margin, b.2 + margin, b.3 + margin))
    }

    /// Zeroes the residual output layer so `g ≡ 0`.
    pub fn zero_residual(&mut self) {
        self.residual.mlp_mut().zero_output_layer();
    }
}

/// `n×2` canonical coordinates of every pixel of `spec`, row-major.
pub fn canvas_coords(spec: &CanvasSpec) -> Array2<f64> {
    Array2::from_shape_fn((spec.height * spec.width, 2), |(i, j)| {
        let (u, v) = spec.coord(i % spec.width, i / spec.width);
        if j == 0 {
            u
        } else {
            v
        }
    })
}

/// 64 points walking the pixel-center rectangle (16 per edge, corners
/// included) plus the frame center.
pub fn boundary_ring(height: usize, width: usize) -> Vec<(f64, f64)> {
    let (u0, u1) = (pixel_center(0, width), pixel_center(width - 1, width));
    let (v0, v1) = (pixel_center(0, height), pixel_center(height - 1, height));
    let corners = [(u0, v0), (u1, v0), (u1, v1), (u0, v1)];
    let mut ring = Vec::with_capacity(BOUNDARY_SAMPLES);
    for e in 0..4 {
        let (a, b) = (corners[e], corners[(e + 1) % 4]);
        for k in 0..16 {
            let s = k as f64 / 16.0;
            ring.push((a.0 + (b.0 - a.0) * s, a.1 + (b.1 - a.1) * s));
        }
    }
    ring.push(((u0 + u1) / 2.0, (v0 + v1) / 2.0));
    ring
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frames_io::FrameSequence;

    fn small_cfg() -> FieldConfig {
        FieldConfig {
            pe_freqs_spatial: 3,
            pe_freqs_time: 2,
            pe_freqs_canonical: 4,
            layers_g: vec![12, 12],
            layers_f: vec![16, 16],
        }
    }

    #[test]
    fn zero_residual_identity_deform() {
        let m = NarcanModel::new(4, 16, 16, &small_cfg(), 3);
        assert!(m.residual.is_zero());
        assert_eq!(m.deform(0.3, 0.7, 2).unwrap(), (0.3, 0.7));
    }

    #[test]
    fn additive_residual_composition() {
        let mut m = NarcanModel::new(2, 16, 16, &small_cfg(), 3);
        let last = m.residual.mlp_mut().layers_mut().last_mut().unwrap();
        last.bias[0] = 0.01;
        let (u, v) = m.deform(0.2, 0.2, 1).unwrap();
        assert!((u - 0.21).abs() < 1e-15 && (v - 0.2).abs() < 1e-15);
    }

    #[test]
    fn deform_jacobian_wrt_translation_is_unit() {
        let mut m = NarcanModel::new(3, 16, 16, &small_cfg(), 5);
        // make g nonzero so the check is not trivially the homography alone
        let last = m.residual.mlp_mut().layers_mut().last_mut().unwrap();
        last.weight.mapv_inplace(|_| 0.01);
        let h = 1e-5;
        for &(u, v) in &[(0.1, 0.9), (0.5, 0.5), (0.77, 0.31)] {
            let mut p = m.clone();
            p.homography.params_mut()[[1, 2]] += h;
            let mut q = m.clone();
            q.homography.params_mut()[[1, 2]] -= h;
            let a = p.deform(u, v, 1).unwrap();
            let b = q.deform(u, v, 1).unwrap();
            let ju = (a.0 - b.0) / (2.0 * h);
            let jv = (a.1 - b.1) / (2.0 * h);
            assert!((ju - 1.0).abs() < 1e-4 && jv.abs() < 1e-4);
        }
    }

    #[test]
    fn constant_canonical_renders_uniform() {
        let mut m = NarcanModel::new(2, 16, 16, &small_cfg(), 3);
        m.canonical.mlp_mut().zero_output_layer();
        m.homography.set_row(1, [1.1, 0.05, 0.2, -0.1, 0.9, 0.1, 0.1, 0.0]);
        for t in 0..2 {
            let img = m.render_frame(t).unwrap();
            assert!(img.pixels().iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn identity_frames_do_not_depend_on_t() {
        let m = NarcanModel::new(5, 16, 16, &small_cfg(), 11);
        assert_eq!(m.render_frame(0).unwrap(), m.render_frame(4).unwrap());
    }

    #[test]
    fn constant_red_canvas() {
        let mut m = NarcanModel::new(2, 16, 16, &small_cfg(), 3);
        m.canonical.set_constant([1.0, 0.0, 0.0]);
        let spec = CanvasSpec::covering(m.canonical_bounds(0.0).unwrap(), 32);
        let canvas = m.render_canonical_raster(&spec).unwrap();
        for px in canvas.pixels().outer_iter().flat_map(|r| r.outer_iter().map(|p| p.to_vec()).collect::<Vec<_>>()) {
            assert!((px[0] - 1.0).abs() < 1e-12 && px[1].abs() < 1e-12 && px[2].abs() < 1e-12);
        }
    }

    #[test]
    fn identity_bounds_are_pixel_center_extremes() {
        let m = NarcanModel::new(3, 96, 96, &small_cfg(), 1);
        let (a, b, c, d) = m.canonical_bounds(0.0).unwrap();
        let lo = 0.5 / 96.0;
        let hi = 95.5 / 96.0;
        for (got, want) in [(a, lo), (b, lo), (c, hi), (d, hi)] {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
        let (a2, _, c2, _) = m.canonical_bounds(0.05).unwrap();
        assert!((a2 - (lo - 0.05)).abs() < 1e-12 && (c2 - (hi + 0.05)).abs() < 1e-12);
        assert_eq!(boundary_ring(96, 96).len(), BOUNDARY_SAMPLES);
    }

    #[test]
    fn translation_shifts_bounds() {
        let mut m = NarcanModel::new(2, 96, 96, &small_cfg(), 1);
        m.homography.set_row(1, [1.0, 0.0, 0.1, 0.0, 1.0, 0.0, 0.0, 0.0]);
        let (_, _, umax, _) = m.canonical_bounds(0.0).unwrap();
        assert!((umax - (95.5 / 96.0 + 0.1)).abs() < 1e-12);
    }

    #[test]
    fn raster_resampled_at_frame_coords_matches_render() {
        let m = NarcanModel::new(2, 16, 16, &small_cfg(), 9);
        let spec = CanvasSpec {
            origin_u: 0.0,
            origin_v: 0.0,
            scale: 1.0 / 256.0,
            height: 257,
            width: 257,
        };
        let canvas = m.render_canonical_raster(&spec).unwrap();
        let frame = m.render_frame(1).unwrap();
        let mut out = [0.0; 3];
        let mut max_err: f64 = 0.0;
        for y in 0..16 {
            for x in 0..16 {
                assert!(canvas.sample_bilinear(pixel_center(x, 16), pixel_center(y, 16), &mut out));
                let want = frame.get(x, y);
                for c in 0..3 {
                    max_err = max_err.max((out[c] - want[c]).abs());
                }
            }
        }
        assert!(max_err < 0.02, "bilinear path error {max_err}");
    }

    fn frame_loss(m: &NarcanModel, target: &FrameSequence) -> f64 {
        (0..m.frame_count())
            .map(|t| {
                let r = m.render_frame(t).unwrap();
                (r.pixels() - target.frame(t).pixels()).mapv(|d| d * d).sum()
            })
            .sum::<f64>()
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let cfg = small_cfg();
        let mut m = NarcanModel::new(2, 16, 16, &cfg, 21);
        m.homography.set_row(1, [1.02, 0.01, 0.03, -0.02, 0.98, 0.01, 0.02, -0.01]);
        // give g a nonzero output so gradients flow through all of it
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let last = m.residual.mlp_mut().layers_mut().last_mut().unwrap();
        last.weight.mapv_inplace(|_| rand::Rng::random_range(&mut rng, -0.02..0.02));
        // nonzero biases keep pre-activations off the ReLU kink, where
        // central differences and the subgradient disagree
        for layer in m.residual.mlp_mut().layers_mut().iter_mut().chain(m.canonical.mlp_mut().layers_mut()) {
            layer.bias.mapv_inplace(|b| b + rand::Rng::random_range(&mut rng, 0.01..0.05));
        }
        let target = FrameSequence::new(
            (0..2)
                .map(|t| RgbImage::from_fn(16, 16, |x, y| [x as f64 / 16.0, y as f64 / 16.0, 0.3 + 0.2 * t as f64]).unwrap())
                .collect(),
        )
        .unwrap();

        let mut batch = PointBatch::default();
        for t in 0..2 {
            let b = PointBatch::frame_pixels(t, 16, 16);
            for i in 0..b.len() {
                batch.push(t, b.u[i], b.v[i]);
            }
        }
        let tape = m.forward_taped(&batch, true).unwrap();
        let mut grad = tape.rgb().clone();
        for i in 0..batch.len() {
            let (t, idx) = (batch.frames[i], i % 256);
            let want = target.frame(t).get(idx % 16, idx / 16);
            for c in 0..3 {
                grad[[i, c]] = 2.0 * (tape.rgb()[[i, c]] - want[c]);
            }
        }
        let grads = m.backward(&tape, &grad);

        let h = 1e-7;
        let check = |label: &str, analytic: f64, perturb: &dyn Fn(&mut NarcanModel, f64)| {
            let mut p = m.clone();
            perturb(&mut p, h);
            let mut q = m.clone();
            perturb(&mut q, -h);
            let fd = (frame_loss(&p, &target) - frame_loss(&q, &target)) / (2.0 * h);
            let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-3);
            assert!(rel < 1e-3, "{label}: fd {fd} analytic {analytic}");
        };
        for k in 0..8 {
            check("homography", grads.homography[[1, k]], &|mm, d| mm.homography.params_mut()[[1, k]] += d);
        }
        let rg = grads.residual.as_ref().unwrap();
        for li in 0..3 {
            check(&format!("g weight {li}"), rg.layers[li].weight[[1, 0]], &|mm, d| mm.residual.mlp_mut().layers_mut()[li].weight[[1, 0]] += d);
            check(&format!("g bias {li}"), rg.layers[li].bias[0], &|mm, d| mm.residual.mlp_mut().layers_mut()[li].bias[0] += d);
        }
        for li in 0..3 {
            check("f weight", grads.canonical.layers[li].weight[[2, 1]], &|mm, d| {
                mm.canonical.mlp_mut().layers_mut()[li].weight[[2, 1]] += d
            });
        }
    }

    #[test]
    fn render_stays_in_unit_range_for_wild_parameters() {
        let mut m = NarcanModel::new(2, 16, 16, &small_cfg(), 2);
        for layer in m.canonical.mlp_mut().layers_mut() {
            layer.weight.mapv_inplace(|w| w * 50.0);
        }
        let img = m.render_frame(0).unwrap();
        assert!(img.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
