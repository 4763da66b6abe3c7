//! Joint optimization of a [`NarcanModel`] under a reconstruction loss and a
//! scheduled prior loss on the canonical raster.

mod optimizer;
mod schedule;

use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fields::{canvas_coords, FieldConfig, FieldError, NarcanModel, PointBatch};
use crate::frames_io::{pixel_center, CanvasSpec, FrameSequence, RasterCanvas};
use crate::metrics::psnr_image;
use crate::prior::{default_prompt, generate_target, PriorError, PriorProvider};

pub use optimizer::{ModelOptimizer, StepSizes};
pub use schedule::{PriorSchedule, SchedulePhase, ScheduleState};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("degenerate homography at frame {frame} after iteration {iter}")]
    DegenerateHomography { iter: usize, frame: usize },
    #[error("non-finite loss at iteration {iter}")]
    NumericFailure { iter: usize },
    #[error("prior backend failed at iteration {iter}: {source}")]
    BackendUnavailable {
        iter: usize,
        #[source]
        source: PriorError,
        /// Parameters at the start of the failing iteration.
        partial: Box<NarcanModel>,
    },
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error(transparent)]
    Field(#[from] FieldError),
}

/// Optimization settings. Defaults follow the full-scale recipe; tests and
/// desk-scale runs shrink the networks, batch, and raster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub total_iters: usize,
    /// Sampled `(t, pixel)` pairs per iteration.
    pub batch_pixels: usize,
    pub lr_homography: f64,
    pub lr_residual: f64,
    pub lr_canonical: f64,
    /// Final learning-rate multiplier of an exponential decay over the run;
    /// 1.0 keeps rates constant.
    pub lr_decay: f64,
    pub lambda_recon: f64,
    pub lambda_prior: f64,
    pub use_homography: bool,
    pub use_residual: bool,
    /// Iterations trained with the residual frozen at zero before it joins,
    /// letting the homographies settle the global alignment first.
    pub residual_warmup_iters: usize,
    pub use_prior: bool,
    /// Keeps frame 0's homography at identity, pinning the canonical frame.
    pub anchor_first_frame: bool,
    pub seed: u64,
    pub fields: FieldConfig,
    /// Long side of the prior raster when its geometry follows the bounds.
    pub prior_raster_long_side: usize,
    /// Margin added to the canonical bounds for the prior raster.
    pub prior_margin: f64,
    /// Fixed prior raster geometry, overriding the bounds-derived one.
    pub prior_canvas: Option<CanvasSpec>,
    /// Raster pixels sampled per iteration for the prior loss; `None` uses all.
    pub prior_batch_pixels: Option<usize>,
    pub special_token: String,
    pub prompt: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_iters: 12000,
            batch_pixels: 8192,
            lr_homography: 1e-4,
            lr_residual: 1e-3,
            lr_canonical: 1e-3,
            lr_decay: 1.0,
            lambda_recon: 1.0,
            lambda_prior: 0.1,
            use_homography: true,
            use_residual: true,
            residual_warmup_iters: 0,
            use_prior: true,
            anchor_first_frame: true,
            seed: 0,
            fields: FieldConfig::default(),
            prior_raster_long_side: 256,
            prior_margin: 0.0,
            prior_canvas: None,
            prior_batch_pixels: None,
            special_token: "sks_scene".into(),
            prompt: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.total_iters == 0 {
            return bad("total_iters must be >= 1");
        }
        if self.batch_pixels == 0 {
            return bad("batch_pixels must be >= 1");
        }
        if self.lambda_recon < 0.0 || self.lambda_prior < 0.0 {
            return bad("loss weights must be >= 0");
        }
        if [self.lr_homography, self.lr_residual, self.lr_canonical].iter().any(|l| !(*l >= 0.0)) {
            return bad("learning rates must be >= 0");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must be in (0, 1]");
        }
        if self.prior_margin < 0.0 {
            return bad("prior_margin must be >= 0");
        }
        Ok(())
    }

    pub fn prompt(&self) -> String {
        self.prompt.clone().unwrap_or_else(|| default_prompt(&self.special_token))
    }

    fn step_sizes(&self, iter: usize) -> StepSizes {
        let decay = self.lr_decay.powf(iter as f64 / self.total_iters as f64);
        StepSizes {
            homography: if self.use_homography { self.lr_homography * decay } else { 0.0 },
            residual: if self.use_residual { self.lr_residual * decay } else { 0.0 },
            canonical: self.lr_canonical * decay,
        }
    }
}

/// Losses at one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub recon_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prior_loss: Option<f64>,
    pub total_loss: f64,
    /// True when the prior target was regenerated at this iteration.
    #[serde(default)]
    pub prior_update: bool,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// One record per iteration.
    pub records: Vec<IterRecord>,
    /// Iterations at which the prior target was regenerated, ascending.
    pub prior_updates: Vec<usize>,
    /// Reconstruction PSNR of every frame after training.
    pub final_psnr: Vec<f64>,
    pub wall_time: Duration,
}

// wall time differs between otherwise identical runs
impl PartialEq for TrainReport {
    fn eq(&self, other: &Self) -> bool {
        self.records == other.records && self.prior_updates == other.prior_updates && self.final_psnr == other.final_psnr
    }
}

#[derive(Serialize)]
struct ReportSummary<'a> {
    summary: SummaryBody<'a>,
}

#[derive(Serialize)]
struct SummaryBody<'a> {
    iterations: usize,
    prior_updates: &'a [usize],
    final_psnr: &'a [f64],
    mean_psnr: f64,
}

impl TrainReport {
    pub fn mean_psnr(&self) -> f64 {
        if self.final_psnr.is_empty() {
            return 0.0;
        }
        self.final_psnr.iter().sum::<f64>() / self.final_psnr.len() as f64
    }

    /// JSON lines: records for every `log_every`-th iteration, every prior
    /// update, and the last iteration, then one summary line.
    pub fn to_jsonl(&self, log_every: usize) -> String {
        let log_every = log_every.max(1);
        let last = self.records.len().saturating_sub(1);
        let mut out = String::new();
        for (i, r) in self.records.iter().enumerate() {
            if i % log_every == 0 || r.prior_update || i == last {
                out.push_str(&serde_json::to_string(r).expect("record serializes"));
                out.push('\n');
            }
        }
        let summary = ReportSummary {
            summary: SummaryBody {
                iterations: self.records.len(),
                prior_updates: &self.prior_updates,
                final_psnr: &self.final_psnr,
                mean_psnr: self.mean_psnr(),
            },
        };
        out.push_str(&serde_json::to_string(&summary).expect("summary serializes"));
        out.push('\n');
        out
    }
}

/// Mean squared error between the model's colors at `batch` and `targets`
/// (`n×3`).
pub fn reconstruction_loss(model: &NarcanModel, batch: &PointBatch, targets: &Array2<f64>) -> Result<f64, FieldError> {
    let rgb = model.render_points(batch)?;
    Ok((&rgb - targets).mapv(|d| d * d).mean().unwrap_or(0.0))
}

/// Draws `n` uniform `(t, pixel)` pairs and their ground-truth colors.
pub fn sample_pixels(seq: &FrameSequence, n: usize, rng: &mut ChaCha8Rng) -> (PointBatch, Array2<f64>) {
    let (t_count, h, w) = (seq.len(), seq.height(), seq.width());
    let mut batch = PointBatch::with_capacity(n);
    let mut targets = Array2::zeros((n, 3));
    for i in 0..n {
        let t = rng.random_range(0..t_count);
        let x = rng.random_range(0..w);
        let y = rng.random_range(0..h);
        batch.push(t, pixel_center(x, w), pixel_center(y, h));
        let px = seq.frame(t).get(x, y);
        for c in 0..3 {
            targets[[i, c]] = px[c];
        }
    }
    (batch, targets)
}

struct PriorTarget {
    canvas: RasterCanvas,
    coords: Array2<f64>,
}

fn prior_canvas_spec(model: &NarcanModel, cfg: &TrainConfig) -> Result<CanvasSpec, FieldError> {
    if let Some(spec) = cfg.prior_canvas {
        return Ok(spec);
    }
    Ok(CanvasSpec::covering(model.canonical_bounds(cfg.prior_margin)?, cfg.prior_raster_long_side))
}

/// Prior loss on (a sample of) the cached target raster; adds its gradient
/// into `grads`. Returns the loss value.
fn prior_step(
    model: &NarcanModel,
    target: &PriorTarget,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    grads: &mut crate::fields::ModelGrads,
) -> f64 {
    let total = target.coords.nrows();
    let picks: Vec<usize> = match cfg.prior_batch_pixels {
        Some(m) if m < total => (0..m).map(|_| rng.random_range(0..total)).collect(),
        _ => (0..total).collect(),
    };
    let width = target.canvas.width();
    let pixels = target.canvas.pixels();
    let mut coords = Array2::zeros((picks.len(), 2));
    let mut wanted = Array2::zeros((picks.len(), 3));
    for (row, &k) in picks.iter().enumerate() {
        coords[[row, 0]] = target.coords[[k, 0]];
        coords[[row, 1]] = target.coords[[k, 1]];
        for c in 0..3 {
            wanted[[row, c]] = pixels[[k / width, k % width, c]];
        }
    }
    let denom = (picks.len() * 3) as f64;
    let mut loss = 0.0;
    let (_, g) = model.canonical.parameter_gradient(&coords, |rgb| {
        let diff = rgb - &wanted;
        loss = diff.mapv(|d| d * d).sum() / denom;
        diff * (2.0 * cfg.lambda_prior / denom)
    });
    grads.canonical.add_assign(&g);
    loss
}

/// Per-frame reconstruction PSNR of `model` against `seq`.
pub fn frame_psnr(model: &NarcanModel, seq: &FrameSequence) -> Result<Vec<f64>, FieldError> {
    (0..seq.len())
        .map(|t| Ok(psnr_image(&model.render_frame(t)?, seq.frame(t)).expect("shapes agree")))
        .collect()
}

/// Trains a model on `seq`. The prior target is regenerated exactly at the
/// iterations where `schedule` says so and reused in between.
pub fn train(
    seq: &FrameSequence,
    cfg: &TrainConfig,
    schedule: &PriorSchedule,
    mut provider: Option<&mut dyn PriorProvider>,
) -> Result<(NarcanModel, TrainReport), TrainError> {
    cfg.validate()?;
    schedule.validate()?;
    if cfg.use_prior && cfg.lambda_prior > 0.0 && provider.is_none() && schedule.count_target_generations() > 0 {
        return Err(TrainError::InvalidConfig("use_prior is set but no prior provider was given".into()));
    }
    let started = Instant::now();
    let mut model = NarcanModel::new(seq.len(), seq.height(), seq.width(), &cfg.fields, cfg.seed);
    let mut opt = ModelOptimizer::new(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_7a11);
    let prompt = cfg.prompt();
    let prior_enabled = cfg.use_prior && cfg.lambda_prior > 0.0;

    let mut records = Vec::with_capacity(cfg.total_iters);
    let mut prior_updates = Vec::new();
    let mut cached: Option<PriorTarget> = None;

    for iter in 0..cfg.total_iters {
        let (batch, targets) = sample_pixels(seq, cfg.batch_pixels, &mut rng);
        let with_residual = cfg.use_residual && iter >= cfg.residual_warmup_iters;
        let tape = model.forward_taped(&batch, with_residual)?;
        let diff = tape.rgb() - &targets;
        let denom = diff.len() as f64;
        let recon = diff.mapv(|d| d * d).sum() / denom;
        let grad_rgb = diff * (2.0 * cfg.lambda_recon / denom);
        let mut grads = model.backward(&tape, &grad_rgb);

        let state = schedule.query(iter);
        let mut prior_loss = None;
        let mut prior_update = false;
        if prior_enabled && state.active {
            if state.regenerate_target {
                let provider = provider.as_deref_mut().expect("checked above");
                let spec = prior_canvas_spec(&model, cfg)?;
                let current = model.render_canonical_raster(&spec)?;
                let canvas = match generate_target(provider, &current, state.noise_strength, &prompt, cfg.seed.wrapping_add(iter as u64)) {
                    Ok(c) => c,
                    Err(e @ PriorError::BackendUnavailable { .. }) => {
                        return Err(TrainError::BackendUnavailable {
                            iter,
                            source: e,
                            partial: Box::new(model),
                        })
                    }
                    Err(e) => return Err(e.into()),
                };
                cached = Some(PriorTarget {
                    coords: canvas_coords(&spec),
                    canvas,
                });
                prior_updates.push(iter);
                prior_update = true;
            }
            if let Some(target) = &cached {
                prior_loss = Some(prior_step(&model, target, cfg, &mut rng, &mut grads));
            }
        }

        let total = cfg.lambda_recon * recon + prior_loss.map_or(0.0, |p| cfg.lambda_prior * p);
        if !total.is_finite() {
            return Err(TrainError::NumericFailure { iter });
        }
        records.push(IterRecord {
            iter,
            recon_loss: recon,
            prior_loss,
            total_loss: total,
            prior_update,
        });

        if cfg.anchor_first_frame {
            grads.homography.row_mut(0).fill(0.0);
        }
        opt.step(&mut model, &grads, cfg.step_sizes(iter));
        if let Err(FieldError::DegenerateHomography { frame }) = model.homography.validate() {
            return Err(TrainError::DegenerateHomography { iter, frame });
        }
        if iter % 1000 == 0 {
            log::debug!("iter {iter}: recon {recon:.6} prior {prior_loss:?}");
        }
    }

    let final_psnr = frame_psnr(&model, seq)?;
    let report = TrainReport {
        records,
        prior_updates,
        final_psnr,
        wall_time: started.elapsed(),
    };
    Ok((model, report))
}
