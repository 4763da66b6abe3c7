//! Project configuration file (TOML).
//!
//! Relative paths are resolved against the directory holding the file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use narcan_core::separation::BlockMatching;
use narcan_core::training::{PriorSchedule, SchedulePhase, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectConfig {
    pub frames_dir: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default = "default_glob")]
    pub frame_glob: String,
    /// Overrides `train.seed` when present.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub segments: SegmentsConfig,
    #[serde(default)]
    pub prior: PriorConfig,
    #[serde(default)]
    pub flow: FlowConfig,
}

fn default_glob() -> String {
    "*.png".into()
}

fn default_log_every() -> usize {
    100
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulePreset {
    #[default]
    Default,
    PerStep,
    None,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub preset: SchedulePreset,
    /// Used by `custom`; `per_step` starts here too.
    pub prior_start_iter: usize,
    pub phases: Vec<SchedulePhase>,
    /// Noise strength of the `per_step` preset.
    pub per_step_strength: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            preset: SchedulePreset::Default,
            prior_start_iter: 1000,
            phases: Vec::new(),
            per_step_strength: 0.2,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self, total_iters: usize) -> Result<PriorSchedule, CliError> {
        Ok(match self.preset {
            SchedulePreset::Default => PriorSchedule::default_schedule(),
            SchedulePreset::PerStep => PriorSchedule::per_step(self.prior_start_iter, total_iters, self.per_step_strength),
            SchedulePreset::None => PriorSchedule::empty(),
            SchedulePreset::Custom => PriorSchedule::new(self.phases.clone(), self.prior_start_iter)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentsConfig {
    pub k: usize,
    pub overlap: usize,
}

impl Default for SegmentsConfig {
    fn default() -> Self {
        Self { k: 1, overlap: 10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorBackend {
    None,
    #[default]
    MockIdentity,
    MockBlur,
    MockOracle,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub backend: PriorBackend,
    pub blur_radius: usize,
    /// Reference canonical (with sidecar) for `mock_oracle`.
    pub oracle_canonical: Option<PathBuf>,
    pub url: Option<String>,
    /// Square side canvases are resampled to before upload; 0 sends them as is.
    pub native_side: usize,
    /// Lets mock backends accept fine-tuning requests.
    pub finetune: bool,
    pub finetune_steps: usize,
    pub finetune_rank: usize,
    pub backend_config: BTreeMap<String, String>,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            backend: PriorBackend::default(),
            blur_radius: 2,
            oracle_canonical: None,
            url: None,
            native_side: 512,
            finetune: false,
            finetune_steps: 500,
            finetune_rank: 4,
            backend_config: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum FlowBackendKind {
    #[default]
    BlockMatching,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub backend: FlowBackendKind,
    pub patch: usize,
    pub radius: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        let bm = BlockMatching::default();
        Self {
            backend: FlowBackendKind::BlockMatching,
            patch: bm.patch,
            radius: bm.radius,
        }
    }
}

impl ProjectConfig {
    /// Parses `path` and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let mut cfg: Self = toml::from_str(&text).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.frames_dir = base.join(&cfg.frames_dir);
        cfg.output_dir = base.join(&cfg.output_dir);
        if let Some(p) = cfg.prior.oracle_canonical.take() {
            cfg.prior.oracle_canonical = Some(base.join(p));
        }
        Ok(cfg)
    }

    /// Training settings with the top-level seed applied.
    pub fn train_config(&self) -> TrainConfig {
        let mut cfg = self.train.clone();
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg
    }

    /// Checks invariants that do not need the frames loaded.
    pub fn validate(&self) -> Result<(), CliError> {
        if !self.frames_dir.is_dir() {
            return Err(CliError::Usage(format!("frames directory {} does not exist", self.frames_dir.display())));
        }
        if self.segments.k == 0 {
            return Err(CliError::Usage("segments.k must be at least 1".into()));
        }
        if let Some(p) = &self.prior.oracle_canonical {
            if !p.is_file() {
                return Err(CliError::Usage(format!("oracle canonical {} does not exist", p.display())));
            }
        }
        if self.prior.backend == PriorBackend::MockOracle && self.prior.oracle_canonical.is_none() {
            return Err(CliError::Usage("prior.backend = \"mock_oracle\" needs prior.oracle_canonical".into()));
        }
        if self.log_every == 0 {
            return Err(CliError::Usage("log_every must be positive".into()));
        }
        self.train_config().validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_takes_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("narcan.toml");
        fs::write(&path, "frames_dir = \"frames\"\noutput_dir = \"out\"\nseed = 7\n").unwrap();
        let cfg = ProjectConfig::load(&path).unwrap();
        assert_eq!(cfg.frames_dir, dir.path().join("frames"));
        assert_eq!(cfg.segments, SegmentsConfig::default());
        assert_eq!(cfg.train_config().seed, 7);
        assert_eq!(cfg.schedule.build(12000).unwrap().count_target_generations(), 224);
    }

    #[test]
    fn nested_sections_parse() {
        let text = r#"
frames_dir = "f"
output_dir = "o"
[train]
total_iters = 50
use_residual = false
[train.fields]
layers_f = [16, 16]
[schedule]
preset = "custom"
prior_start_iter = 10
phases = [{ iter_start = 10, iter_end = 50, noise_strength = 0.3, update_every = 5 }]
[segments]
k = 2
overlap = 4
[prior]
backend = "mock_blur"
blur_radius = 1
"#;
        let cfg: ProjectConfig = toml::from_str(text).unwrap();
        assert_eq!(cfg.train.total_iters, 50);
        assert_eq!(cfg.train.fields.layers_f, vec![16, 16]);
        assert_eq!(cfg.schedule.build(50).unwrap().count_target_generations(), 8);
        assert_eq!(cfg.prior.backend, PriorBackend::MockBlur);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<ProjectConfig>("frames_dir = \"f\"\noutput_dir = \"o\"\nbogus = 1\n");
        assert!(err.is_err());
    }
}
