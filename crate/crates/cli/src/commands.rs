//! Command implementations, callable in-process.

use std::fs;
use std::path::{Path, PathBuf};

use narcan_core::editing::{composite_edit, propagate_mask, render_edited_video, BlendMode, EditLayer, MaskLayer};
use narcan_core::fields::checkpoint::{save_model, segment_dir};
use narcan_core::fields::NarcanModel;
use narcan_core::frames_io::{
    atomic_write, export_canonical, import_canonical, load_frames, save_frames, CanvasSpec, FrameSequence, Placement,
    RasterCanvas, RgbImage,
};
use narcan_core::metrics::{psnr_image, psnr_sequence, ConsistencyReport};
use narcan_core::prior::{finetune, FinetuneSpec, HttpPrior, MockPrior, MockPriorKind, PriorProvider, PRIOR_URL_ENV};
use narcan_core::separation::{
    grid_concat, grid_split, load_model_set, plan_segments, render_sequence, save_model_set, train_segments,
    BlockMatching, FlowBackend, GridManifest, SegmentModelSet, SegmentPlan, ZeroFlow,
};
use narcan_core::synthetic::{scene_by_name, SceneMeta, SCENE_NAMES};
use narcan_core::training::{TrainConfig, TrainError, TrainReport};
use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::config::{FlowBackendKind, FlowConfig, PriorBackend, PriorConfig, ProjectConfig};
use crate::CliError;

pub const REPORT_FILE: &str = "report.jsonl";
pub const EDITS_FILE: &str = "edits.json";
pub const PARTIAL_DIR: &str = "partial";

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct FitOverrides {
    pub output_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub total_iters: Option<usize>,
    pub k: Option<usize>,
    pub overlap: Option<usize>,
    pub prior: Option<PriorBackend>,
}

impl FitOverrides {
    fn apply(&self, cfg: &mut ProjectConfig) {
        if let Some(dir) = &self.output_dir {
            cfg.output_dir = dir.clone();
        }
        if let Some(seed) = self.seed {
            cfg.seed = Some(seed);
        }
        if let Some(n) = self.total_iters {
            cfg.train.total_iters = n;
        }
        if let Some(k) = self.k {
            cfg.segments.k = k;
        }
        if let Some(w) = self.overlap {
            cfg.segments.overlap = w;
        }
        if let Some(p) = self.prior {
            cfg.prior.backend = p;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOutcome {
    pub checkpoint: PathBuf,
    pub segments: usize,
    pub prior_updates: usize,
    pub finetuned: bool,
    /// PSNR of the blended reconstruction against the input frames.
    pub psnr: f64,
    pub reports: Vec<PathBuf>,
}

/// A configured prior plus the raster geometry it insists on, if any.
pub struct PriorSetup {
    pub provider: Option<Box<dyn PriorProvider>>,
    pub canvas: Option<CanvasSpec>,
}

/// Builds the prior backend. A non-empty `NARCAN_PRIOR_URL` selects the HTTP
/// backend over whatever the config names, unless the prior is disabled.
pub fn build_provider(cfg: &PriorConfig) -> Result<PriorSetup, CliError> {
    let native = (cfg.native_side > 0).then_some(cfg.native_side);
    let none = PriorSetup {
        provider: None,
        canvas: None,
    };
    if cfg.backend == PriorBackend::None {
        return Ok(none);
    }
    if let Some(http) = HttpPrior::from_env() {
        log::info!("prior: HTTP backend at {} (from {PRIOR_URL_ENV})", http.base_url());
        return Ok(PriorSetup {
            provider: Some(Box::new(http.with_native_side(native))),
            canvas: None,
        });
    }
    let mock = |kind| Some(Box::new(MockPrior::new(kind).with_finetune(cfg.finetune)) as Box<dyn PriorProvider>);
    Ok(match cfg.backend {
        PriorBackend::None => none,
        PriorBackend::MockIdentity => PriorSetup {
            provider: mock(MockPriorKind::Identity),
            canvas: None,
        },
        PriorBackend::MockBlur => PriorSetup {
            provider: mock(MockPriorKind::Blur { radius: cfg.blur_radius }),
            canvas: None,
        },
        PriorBackend::MockOracle => {
            let path = cfg
                .oracle_canonical
                .as_deref()
                .ok_or_else(|| CliError::Usage("mock_oracle needs prior.oracle_canonical".into()))?;
            let reference = import_canonical(path, None)?;
            if reference.channels() != 3 {
                return Err(CliError::Usage(format!(
                    "oracle canonical {} must be RGB, found {} channels",
                    path.display(),
                    reference.channels()
                )));
            }
            let spec = reference.spec();
            PriorSetup {
                provider: mock(MockPriorKind::Oracle(reference)),
                canvas: Some(spec),
            }
        }
        PriorBackend::Http => {
            let url = cfg.url.clone().filter(|u| !u.is_empty()).ok_or_else(|| {
                CliError::Usage(format!("prior.backend = \"http\" needs prior.url or {PRIOR_URL_ENV}"))
            })?;
            PriorSetup {
                provider: Some(Box::new(HttpPrior::new(url).with_native_side(native))),
                canvas: None,
            }
        }
    })
}

/// Everything one training run produced.
pub struct FitResult {
    pub frames: FrameSequence,
    pub set: SegmentModelSet,
    pub reports: Vec<TrainReport>,
    pub train: TrainConfig,
    pub finetuned: bool,
}

fn manifest_extra(cfg: &ProjectConfig, train: &TrainConfig) -> serde_json::Map<String, serde_json::Value> {
    let mut extra = serde_json::Map::new();
    extra.insert("seed".into(), train.seed.into());
    extra.insert("train".into(), serde_json::to_value(train).expect("config serializes"));
    extra.insert("schedule".into(), serde_json::to_value(&cfg.schedule).expect("config serializes"));
    extra.insert("prior_backend".into(), serde_json::to_value(cfg.prior.backend).expect("config serializes"));
    extra
}

/// Loads frames, fine-tunes the prior when it can, and trains every
/// segment. On a backend failure mid-run, the partial model is saved under
/// `output_dir/partial` before the error is returned.
pub fn fit_project(cfg: &ProjectConfig) -> Result<FitResult, CliError> {
    cfg.validate()?;
    let frames = load_frames(&cfg.frames_dir, &cfg.frame_glob)?;
    let mut train = cfg.train_config();
    let schedule = cfg.schedule.build(train.total_iters)?;
    let plan = plan_segments(frames.len(), cfg.segments.k, cfg.segments.overlap)?;

    let mut setup = if train.use_prior {
        build_provider(&cfg.prior)?
    } else {
        PriorSetup {
            provider: None,
            canvas: None,
        }
    };
    if setup.provider.is_none() {
        train.use_prior = false;
    }
    if train.prior_canvas.is_none() {
        train.prior_canvas = setup.canvas;
    }

    let mut finetuned = false;
    if let Some(p) = setup.provider.as_deref_mut() {
        if p.supports_finetune() {
            let spec = FinetuneSpec {
                frames: &frames,
                special_token: train.special_token.clone(),
                steps: cfg.prior.finetune_steps,
                rank: cfg.prior.finetune_rank,
                backend_config: cfg.prior.backend_config.clone(),
            };
            let handle = finetune(p, &spec)?;
            log::info!("prior adapter {}", handle.0);
            finetuned = true;
        }
    }

    let provider = setup.provider.as_deref_mut().map(|p| p as &mut dyn PriorProvider);
    let trained = train_segments(&frames, &plan, &train, &schedule, provider);
    match trained {
        Ok((set, reports)) => Ok(FitResult {
            frames,
            set,
            reports,
            train,
            finetuned,
        }),
        Err(e) => {
            if let TrainError::BackendUnavailable { partial, iter, .. } = &e {
                let dir = cfg.output_dir.join(PARTIAL_DIR);
                let mut extra = manifest_extra(cfg, &train);
                extra.insert("stopped_at_iter".into(), (*iter).into());
                save_model(partial, &dir, extra)?;
                log::warn!("backend failed at iteration {iter}; partial model in {}", dir.display());
            }
            Err(e.into())
        }
    }
}

fn write_reports(dir: &Path, reports: &[TrainReport], log_every: usize) -> Result<Vec<PathBuf>, CliError> {
    let mut paths = Vec::with_capacity(reports.len());
    for (i, report) in reports.iter().enumerate() {
        let path = if reports.len() == 1 {
            dir.join(REPORT_FILE)
        } else {
            segment_dir(dir, i).join(REPORT_FILE)
        };
        atomic_write(&path, report.to_jsonl(log_every).as_bytes())?;
        paths.push(path);
    }
    Ok(paths)
}

pub fn cmd_fit(config_path: &Path, overrides: &FitOverrides) -> Result<FitOutcome, CliError> {
    let mut cfg = ProjectConfig::load(config_path)?;
    overrides.apply(&mut cfg);
    let result = fit_project(&cfg)?;
    let out = &cfg.output_dir;
    save_model_set(&result.set, out, manifest_extra(&cfg, &result.train))?;
    let reports = write_reports(out, &result.reports, cfg.log_every)?;
    let stale = out.join(PARTIAL_DIR);
    if stale.is_dir() {
        fs::remove_dir_all(&stale).map_err(CliError::io(&stale))?;
    }
    let rendered = render_sequence(&result.set)?;
    Ok(FitOutcome {
        checkpoint: out.clone(),
        segments: result.set.plan.k,
        prior_updates: result.reports.iter().map(|r| r.prior_updates.len()).sum(),
        finetuned: result.finetuned,
        psnr: psnr_sequence(&rendered, &result.frames)?,
        reports,
    })
}

/// Where `render` takes edited canonicals from.
#[derive(Debug, Clone, PartialEq)]
pub enum EditSource {
    None,
    /// One file with a geometry sidecar per segment.
    Files(Vec<PathBuf>),
    /// A directory written by `import-edit`.
    Directory(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderOutcome {
    pub out: PathBuf,
    pub frames: usize,
    pub edited: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EditsIndex {
    files: Vec<String>,
}

fn load_edits(source: &EditSource) -> Result<Option<Vec<RasterCanvas>>, CliError> {
    let paths = match source {
        EditSource::None => return Ok(None),
        EditSource::Files(paths) => paths.clone(),
        EditSource::Directory(dir) => {
            let index_path = dir.join(EDITS_FILE);
            let bytes = fs::read(&index_path).map_err(CliError::io(&index_path))?;
            let index: EditsIndex = serde_json::from_slice(&bytes).map_err(|e| CliError::Config {
                path: index_path.clone(),
                reason: e.to_string(),
            })?;
            index.files.iter().map(|f| dir.join(f)).collect()
        }
    };
    let canvases = paths
        .iter()
        .map(|p| import_canonical(p, None))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Some(canvases))
}

pub fn cmd_render(checkpoint: &Path, edits: &EditSource, out: &Path) -> Result<RenderOutcome, CliError> {
    let set = load_model_set(checkpoint)?;
    let (frames, edited) = match load_edits(edits)? {
        None => (render_sequence(&set)?, false),
        Some(canvases) => (render_edited_video(&set, &canvases)?, true),
    };
    save_frames(&frames, out)?;
    Ok(RenderOutcome {
        out: out.to_path_buf(),
        frames: frames.len(),
        edited,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExportOptions {
    pub long_side: Option<usize>,
    pub margin: f64,
    pub grid: bool,
}

impl Default for ExportOptions {
    fn default() -> Self {
        Self {
            long_side: None,
            margin: 0.05,
            grid: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportOutcome {
    pub files: Vec<PathBuf>,
    pub grid_manifest: Option<PathBuf>,
}

/// `dir/name.png` → `dir/name.grid.json`.
pub fn grid_manifest_path(image_path: &Path) -> PathBuf {
    let stem = image_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    image_path.with_file_name(format!("{stem}.grid.json"))
}

fn numbered_path(path: &Path, i: usize) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let ext = path.extension().map(|e| e.to_string_lossy().into_owned()).unwrap_or_else(|| "png".into());
    path.with_file_name(format!("{stem}_{i:02}.{ext}"))
}

fn union(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> (f64, f64, f64, f64) {
    (a.0.min(b.0), a.1.min(b.1), a.2.max(b.2), a.3.max(b.3))
}

/// Canonical rasters of every segment. With `shared`, all use one geometry
/// covering every segment's footprint.
pub fn canonical_rasters(set: &SegmentModelSet, opts: &ExportOptions, shared: bool) -> Result<Vec<RasterCanvas>, CliError> {
    let long_side = opts.long_side.unwrap_or(2 * set.height().max(set.width()));
    let bounds = set
        .models
        .iter()
        .map(|m| m.canonical_bounds(opts.margin))
        .collect::<Result<Vec<_>, _>>()?;
    let common = bounds.iter().copied().reduce(union).expect("at least one segment");
    set.models
        .iter()
        .zip(&bounds)
        .map(|(model, &b)| {
            let spec = CanvasSpec::covering(if shared { common } else { b }, long_side);
            Ok(model.render_canonical_raster(&spec)?)
        })
        .collect()
}

pub fn cmd_export_canonical(checkpoint: &Path, out: &Path, opts: &ExportOptions) -> Result<ExportOutcome, CliError> {
    let set = load_model_set(checkpoint)?;
    let canvases = canonical_rasters(&set, opts, opts.grid)?;
    if opts.grid {
        let (grid, manifest) = grid_concat(&canvases)?;
        export_canonical(&grid, out)?;
        let manifest_path = grid_manifest_path(out);
        let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        atomic_write(&manifest_path, &json)?;
        return Ok(ExportOutcome {
            files: vec![out.to_path_buf()],
            grid_manifest: Some(manifest_path),
        });
    }
    let mut files = Vec::with_capacity(canvases.len());
    for (i, canvas) in canvases.iter().enumerate() {
        let path = if canvases.len() == 1 {
            out.to_path_buf()
        } else {
            numbered_path(out, i)
        };
        export_canonical(canvas, &path)?;
        files.push(path);
    }
    Ok(ExportOutcome {
        files,
        grid_manifest: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportOutcome {
    pub files: Vec<PathBuf>,
}

/// Gives an externally edited image the geometry of the canonical it was
/// painted on. A grid reference is split back into one canvas per segment.
/// With `layer`, an RGBA edit is composited over the reference using `mode`;
/// otherwise the edit is kept as is.
pub fn cmd_import_edit(reference: &Path, edit: &Path, out: &Path, mode: BlendMode, layer: bool) -> Result<ImportOutcome, CliError> {
    let base = import_canonical(reference, None)?;
    let placement = Placement {
        origin: base.origin(),
        scale: base.scale(),
    };
    let mut edited = import_canonical(edit, Some(placement))?;
    if edited.height() != base.height() || edited.width() != base.width() {
        return Err(CliError::Usage(format!(
            "edit {} is {}x{}, reference {} is {}x{}",
            edit.display(),
            edited.width(),
            edited.height(),
            reference.display(),
            base.width(),
            base.height()
        )));
    }
    if layer {
        edited = composite_edit(&base, &EditLayer::new(edited, mode)?)?;
    }
    let grid_path = grid_manifest_path(reference);
    let canvases = if grid_path.is_file() {
        let bytes = fs::read(&grid_path).map_err(CliError::io(&grid_path))?;
        let manifest: GridManifest = serde_json::from_slice(&bytes).map_err(|e| CliError::Config {
            path: grid_path.clone(),
            reason: e.to_string(),
        })?;
        grid_split(&edited, &manifest)?
    } else {
        vec![edited]
    };
    fs::create_dir_all(out).map_err(CliError::io(out))?;
    let names: Vec<String> = (0..canvases.len()).map(|i| format!("edit_{i:02}.png")).collect();
    for (canvas, name) in canvases.iter().zip(&names) {
        export_canonical(canvas, &out.join(name))?;
    }
    let index = serde_json::to_vec_pretty(&EditsIndex { files: names.clone() }).expect("index serializes");
    atomic_write(&out.join(EDITS_FILE), &index)?;
    Ok(ImportOutcome {
        files: names.iter().map(|n| out.join(n)).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskOutcome {
    pub out: PathBuf,
    pub frames: usize,
    /// Fraction of each frame covered by the mask.
    pub coverage: Vec<f64>,
}

fn to_mask(canvas: RasterCanvas) -> Result<MaskLayer, CliError> {
    let canvas = match canvas.channels() {
        1 => canvas,
        _ => {
            let gray = canvas
                .pixels()
                .slice(ndarray::s![.., .., 0..3.min(canvas.channels())])
                .mean_axis(Axis(2))
                .expect("non-empty channel axis")
                .insert_axis(Axis(2));
            RasterCanvas::new(gray, canvas.origin(), canvas.scale())?
        }
    };
    Ok(MaskLayer::new(canvas)?)
}

pub fn cmd_propagate_mask(checkpoint: &Path, masks: &[PathBuf], out: &Path) -> Result<MaskOutcome, CliError> {
    let set = load_model_set(checkpoint)?;
    let layers = masks
        .iter()
        .map(|p| to_mask(import_canonical(p, None)?))
        .collect::<Result<Vec<_>, _>>()?;
    let propagated = propagate_mask(&set, &layers)?;
    let coverage = propagated
        .iter()
        .map(|m| m.iter().filter(|&&b| b).count() as f64 / m.len() as f64)
        .collect();
    let frames = propagated
        .iter()
        .map(|m| {
            let pixels = Array3::from_shape_fn((m.nrows(), m.ncols(), 3), |(y, x, _)| if m[[y, x]] { 1.0 } else { 0.0 });
            RgbImage::new(pixels)
        })
        .collect::<Result<Vec<_>, _>>()?;
    save_frames(&FrameSequence::new(frames)?, out)?;
    Ok(MaskOutcome {
        out: out.to_path_buf(),
        frames: propagated.len(),
        coverage,
    })
}

pub fn flow_backend(cfg: &FlowConfig) -> Box<dyn FlowBackend> {
    match cfg.backend {
        FlowBackendKind::BlockMatching => Box::new(BlockMatching {
            patch: cfg.patch,
            radius: cfg.radius,
            ..BlockMatching::default()
        }),
        FlowBackendKind::Zero => Box::new(ZeroFlow),
    }
}

pub fn cmd_metrics(video: &Path, against: Option<&Path>, flow: &FlowConfig, csv: Option<&Path>) -> Result<ConsistencyReport, CliError> {
    let frames = load_frames(video, "*.png")?;
    let reference = against.map(|p| load_frames(p, "*.png")).transpose()?;
    let mut backend = flow_backend(flow);
    let report = ConsistencyReport::compute(&frames, backend.as_mut(), reference.as_ref())?;
    if let Some(path) = csv {
        atomic_write(path, report.to_csv().as_bytes())?;
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum AblationVariant {
    Full,
    NoHomography,
    NoResidual,
    NoPrior,
}

impl AblationVariant {
    pub fn name(self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::NoHomography => "no_homography",
            AblationVariant::NoResidual => "no_residual",
            AblationVariant::NoPrior => "no_prior",
        }
    }

    pub fn apply(self, cfg: &mut TrainConfig) {
        match self {
            AblationVariant::Full => {}
            AblationVariant::NoHomography => cfg.use_homography = false,
            AblationVariant::NoResidual => cfg.use_residual = false,
            AblationVariant::NoPrior => cfg.use_prior = false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub psnr: f64,
    pub canonical: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub canonical_psnr: Option<f64>,
}

/// PSNR of the first segment's canonical, rendered on the GT raster grid.
pub fn canonical_psnr(model: &NarcanModel, gt: &RasterCanvas) -> Result<f64, CliError> {
    if gt.channels() != 3 {
        return Err(CliError::Usage(format!("ground-truth canonical must be RGB, found {} channels", gt.channels())));
    }
    let rendered = model.render_canonical_raster(&gt.spec())?;
    let a = RgbImage::new(rendered.into_pixels())?;
    let b = RgbImage::new(gt.pixels().clone())?;
    Ok(psnr_image(&a, &b)?)
}

/// Trains one variant into `output_dir/ablate_<variant>` and reports its
/// reconstruction PSNR and canonical snapshot.
pub fn cmd_ablate(config_path: &Path, variant: AblationVariant, gt_canonical: Option<&Path>) -> Result<AblationRow, CliError> {
    let mut cfg = ProjectConfig::load(config_path)?;
    variant.apply(&mut cfg.train);
    cfg.output_dir = cfg.output_dir.join(format!("ablate_{}", variant.name()));
    let gt = gt_canonical.map(|p| import_canonical(p, None)).transpose()?;
    let result = fit_project(&cfg)?;
    let out = &cfg.output_dir;
    save_model_set(&result.set, out, manifest_extra(&cfg, &result.train))?;
    write_reports(out, &result.reports, cfg.log_every)?;
    let snapshot = out.join("canonical.png");
    let canvases = canonical_rasters(&result.set, &ExportOptions::default(), false)?;
    export_canonical(&canvases[0], &snapshot)?;
    let rendered = render_sequence(&result.set)?;
    Ok(AblationRow {
        variant,
        psnr: psnr_sequence(&rendered, &result.frames)?,
        canonical: snapshot,
        canonical_psnr: gt.map(|g| canonical_psnr(&result.set.models[0], &g)).transpose()?,
    })
}

pub fn cmd_plan(frames: usize, k: usize, overlap: usize) -> Result<SegmentPlan, CliError> {
    Ok(plan_segments(frames, k, overlap)?)
}

/// Writes a fixture scene (frames, GT canonical, GT masks, metadata).
pub fn cmd_synthetic(name: &str, frames: usize, size: usize, seed: u64, out: &Path) -> Result<SceneMeta, CliError> {
    if frames < 2 || size < narcan_core::frames_io::MIN_IMAGE_SIDE {
        return Err(CliError::Usage(format!(
            "fixtures need at least 2 frames and {} px, got {frames} frames of {size} px",
            narcan_core::frames_io::MIN_IMAGE_SIDE
        )));
    }
    let scene = scene_by_name(name, frames, size, seed)
        .ok_or_else(|| CliError::Usage(format!("unknown scene `{name}`; expected one of {}", SCENE_NAMES.join(", "))))?;
    scene.write(out, name)?;
    Ok(scene.meta(name))
}
