use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use narcan_core::editing::BlendMode;

use crate::commands::{AblationVariant, EditSource, ExportOptions, FitOverrides};
use crate::config::{FlowBackendKind, FlowConfig, PriorBackend, ProjectConfig};
use crate::CliError;

#[derive(Debug, Parser)]
#[command(name = "narcan", version, about = "Canonical-image video fitting and editing")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model (or one per segment) and write the checkpoint.
    Fit(FitArgs),
    /// Render frames from a checkpoint, optionally with edited canonicals.
    Render(RenderArgs),
    /// Write the canonical image(s) of a checkpoint as PNG with geometry sidecars.
    ExportCanonical(ExportArgs),
    /// Attach canonical geometry to an externally edited image.
    ImportEdit(ImportEditArgs),
    /// Carry canonical-space masks to every frame.
    PropagateMask(PropagateMaskArgs),
    /// Temporal-consistency metrics of a frame directory.
    Metrics(MetricsArgs),
    /// Train one ablation variant and print a comparison row.
    Ablate(AblateArgs),
    /// Print a segment plan, or write a synthetic fixture scene.
    Plan(PlanArgs),
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub overlap: Option<usize>,
    #[arg(long, value_enum)]
    pub prior: Option<PriorArg>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum PriorArg {
    None,
    MockIdentity,
    MockBlur,
    MockOracle,
    Http,
}

impl From<PriorArg> for PriorBackend {
    fn from(p: PriorArg) -> Self {
        match p {
            PriorArg::None => PriorBackend::None,
            PriorArg::MockIdentity => PriorBackend::MockIdentity,
            PriorArg::MockBlur => PriorBackend::MockBlur,
            PriorArg::MockOracle => PriorBackend::MockOracle,
            PriorArg::Http => PriorBackend::Http,
        }
    }
}

impl FitArgs {
    pub fn overrides(&self) -> FitOverrides {
        FitOverrides {
            output_dir: self.output.clone(),
            seed: self.seed,
            total_iters: self.iters,
            k: self.k,
            overlap: self.overlap,
            prior: self.prior.map(Into::into),
        }
    }
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Edited canonical with a geometry sidecar; repeat once per segment.
    #[arg(long = "edited-canonical", conflicts_with = "edits")]
    pub edited_canonical: Vec<PathBuf>,
    /// Directory written by `import-edit`.
    #[arg(long)]
    pub edits: Option<PathBuf>,
}

impl RenderArgs {
    pub fn edit_source(&self) -> EditSource {
        match (&self.edits, self.edited_canonical.is_empty()) {
            (Some(dir), _) => EditSource::Directory(dir.clone()),
            (None, false) => EditSource::Files(self.edited_canonical.clone()),
            (None, true) => EditSource::None,
        }
    }
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output PNG; multi-segment checkpoints get `_NN` suffixes unless `--grid`.
    #[arg(long)]
    pub out: PathBuf,
    /// Long side of the raster in pixels (default: twice the frame's long side).
    #[arg(long)]
    pub long_side: Option<usize>,
    /// Fractional margin around the covered canonical region.
    #[arg(long, default_value_t = 0.05)]
    pub margin: f64,
    /// Tile all segment canonicals into one 2×2 image.
    #[arg(long)]
    pub grid: bool,
}

impl ExportArgs {
    pub fn options(&self) -> ExportOptions {
        ExportOptions {
            long_side: self.long_side,
            margin: self.margin,
            grid: self.grid,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum ModeArg {
    Replace,
    #[default]
    AlphaOver,
}

impl From<ModeArg> for BlendMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Replace => BlendMode::Replace,
            ModeArg::AlphaOver => BlendMode::AlphaOver,
        }
    }
}

#[derive(Debug, Args)]
pub struct ImportEditArgs {
    /// The exported canonical (or grid) the edit was made on.
    #[arg(long)]
    pub reference: PathBuf,
    /// Edited image, same pixel size as the reference.
    #[arg(long)]
    pub edit: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t)]
    pub mode: ModeArg,
    /// Treat an RGBA edit as an overlay and composite it over the reference.
    #[arg(long)]
    pub layer: bool,
}

#[derive(Debug, Args)]
pub struct PropagateMaskArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Canonical-space mask with a geometry sidecar; repeat once per segment.
    #[arg(long, required = true)]
    pub mask: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    #[arg(long)]
    pub video: PathBuf,
    /// Second video for PSNR/SSIM.
    #[arg(long)]
    pub against: Option<PathBuf>,
    /// Per-frame CSV breakdown.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Takes `[flow]` from a project config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub flow: Option<FlowBackendKind>,
}

impl MetricsArgs {
    pub fn flow_config(&self) -> Result<FlowConfig, CliError> {
        let mut flow = match &self.config {
            Some(path) => ProjectConfig::load(path)?.flow,
            None => FlowConfig::default(),
        };
        if let Some(kind) = self.flow {
            flow.backend = kind;
        }
        Ok(flow)
    }
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, value_enum)]
    pub variant: AblationVariant,
    /// Ground-truth canonical (with sidecar) for a canonical PSNR column.
    #[arg(long)]
    pub gt_canonical: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[arg(long, default_value_t = 20)]
    pub frames: usize,
    #[arg(long, default_value_t = 1)]
    pub k: usize,
    #[arg(long, default_value_t = 10)]
    pub overlap: usize,
    /// Write the named fixture scene instead of printing a plan.
    #[arg(long)]
    pub synthetic: Option<String>,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}
