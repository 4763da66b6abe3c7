//! The `narcan` pipeline: fit, render, canonical export/import, mask
//! propagation, metrics, ablations and fixture generation.

pub mod args;
pub mod commands;
pub mod config;

use std::io::Write;
use std::path::PathBuf;

use narcan_core::{EXIT_USER, Error as CoreError};
use thiserror::Error;

pub use args::{Cli, Command};
pub use commands::*;
pub use config::ProjectConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("config {path}: {reason}")]
    Config { path: PathBuf, reason: String },
    #[error("{0}")]
    Usage(String),
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) => e.exit_code(),
            _ => EXIT_USER,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }
}

macro_rules! from_core {
    ($($t:ty),*) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Core(e.into())
            }
        })*
    };
}

from_core!(
    narcan_core::frames_io::FramesError,
    narcan_core::fields::FieldError,
    narcan_core::prior::PriorError,
    narcan_core::training::TrainError,
    narcan_core::separation::SeparationError,
    narcan_core::editing::EditError,
    narcan_core::metrics::MetricsError
);

/// Dispatches one parsed command line.
pub fn run(cli: Cli) -> Result<(), CliError> {
    let out = match cli.command {
        Command::Fit(a) => {
            let outcome = cmd_fit(&a.config, &a.overrides())?;
            serde_json::to_string_pretty(&outcome)
        }
        Command::Render(a) => {
            let outcome = cmd_render(&a.checkpoint, &a.edit_source(), &a.out)?;
            serde_json::to_string_pretty(&outcome)
        }
        Command::ExportCanonical(a) => {
            let outcome = cmd_export_canonical(&a.checkpoint, &a.out, &a.options())?;
            serde_json::to_string_pretty(&outcome)
        }
        Command::ImportEdit(a) => {
            let outcome = cmd_import_edit(&a.reference, &a.edit, &a.out, a.mode.into(), a.layer)?;
            serde_json::to_string_pretty(&outcome)
        }
        Command::PropagateMask(a) => {
            let outcome = cmd_propagate_mask(&a.checkpoint, &a.mask, &a.out)?;
            serde_json::to_string_pretty(&outcome)
        }
        Command::Metrics(a) => {
            let report = cmd_metrics(&a.video, a.against.as_deref(), &a.flow_config()?, a.csv.as_deref())?;
            serde_json::to_string_pretty(&report)
        }
        Command::Ablate(a) => {
            let row = cmd_ablate(&a.config, a.variant, a.gt_canonical.as_deref())?;
            serde_json::to_string(&row)
        }
        Command::Plan(a) => match &a.synthetic {
            Some(name) => {
                let out = a.out.as_deref().ok_or_else(|| CliError::Usage("--synthetic needs --out".into()))?;
                let meta = cmd_synthetic(name, a.frames, a.size, a.seed, out)?;
                serde_json::to_string_pretty(&meta)
            }
            None => serde_json::to_string_pretty(&cmd_plan(a.frames, a.k, a.overlap)?),
        },
    };
    let mut stdout = std::io::stdout().lock();
    match writeln!(stdout, "{}", out.expect("outputs serialize")) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(CliError::io("<stdout>")(e)),
        _ => Ok(()),
    }
}
