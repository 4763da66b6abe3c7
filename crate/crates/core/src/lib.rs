//! Video as a single canonical image plus a per-frame deformation field
//! (homography followed by a learned residual), with a scheduled diffusion
//! prior keeping the canonical image natural.

pub mod editing;
pub mod fields;
pub mod frames_io;
pub mod metrics;
pub mod prior;
pub mod separation;
pub mod synthetic;
pub mod training;

use thiserror::Error;

/// Exit status for success.
pub const EXIT_OK: i32 = 0;
/// Exit status for user or configuration errors.
pub const EXIT_USER: i32 = 2;
/// Exit status for failures of an external backend.
pub const EXIT_BACKEND: i32 = 3;
/// Exit status for numeric failures during optimization.
pub const EXIT_NUMERIC: i32 = 4;

/// Any error of this crate, tagged with the module it came from.
#[derive(Debug, Error)]
pub enum Error {
    #[error("frames_io: {0}")]
    Frames(#[from] frames_io::FramesError),
    #[error("fields: {0}")]
    Field(#[from] fields::FieldError),
    #[error("prior: {0}")]
    Prior(#[from] prior::PriorError),
    #[error("training: {0}")]
    Training(#[from] training::TrainError),
    #[error("separation: {0}")]
    Separation(#[from] separation::SeparationError),
    #[error("editing: {0}")]
    Editing(#[from] editing::EditError),
    #[error("metrics: {0}")]
    Metrics(#[from] metrics::MetricsError),
}

fn field_code(e: &fields::FieldError) -> i32 {
    match e {
        fields::FieldError::DegenerateHomography { .. } => EXIT_NUMERIC,
        _ => EXIT_USER,
    }
}

fn prior_code(e: &prior::PriorError) -> i32 {
    match e {
        prior::PriorError::BackendUnavailable { .. } | prior::PriorError::Backend(_) => EXIT_BACKEND,
        _ => EXIT_USER,
    }
}

fn flow_code(e: &separation::FlowError) -> i32 {
    match e {
        separation::FlowError::BackendUnavailable(_) => EXIT_BACKEND,
        _ => EXIT_USER,
    }
}

fn separation_code(e: &separation::SeparationError) -> i32 {
    match e {
        separation::SeparationError::Flow(f) => flow_code(f),
        separation::SeparationError::Field(f) => field_code(f),
        _ => EXIT_USER,
    }
}

impl Error {
    /// Process exit status for this error: 2 user/config, 3 backend,
    /// 4 numeric.
    pub fn exit_code(&self) -> i32 {
        use training::TrainError as T;
        match self {
            Error::Frames(_) => EXIT_USER,
            Error::Field(e) => field_code(e),
            Error::Prior(e) => prior_code(e),
            Error::Training(e) => match e {
                T::InvalidConfig(_) => EXIT_USER,
                T::DegenerateHomography { .. } | T::NumericFailure { .. } => EXIT_NUMERIC,
                T::BackendUnavailable { .. } => EXIT_BACKEND,
                T::Prior(p) => prior_code(p),
                T::Field(f) => field_code(f),
            },
            Error::Separation(e) => separation_code(e),
            Error::Editing(e) => match e {
                editing::EditError::Field(f) => field_code(f),
                editing::EditError::Separation(s) => separation_code(s),
                _ => EXIT_USER,
            },
            Error::Metrics(e) => match e {
                metrics::MetricsError::Flow(f) => flow_code(f),
                _ => EXIT_USER,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        let numeric: Error = training::TrainError::NumericFailure { iter: 3 }.into();
        assert_eq!(numeric.exit_code(), EXIT_NUMERIC);
        assert!(numeric.to_string().starts_with("training: "));
        let backend: Error = prior::PriorError::BackendUnavailable {
            reason: "down".into(),
            retry_hint: "retry".into(),
        }
        .into();
        assert_eq!(backend.exit_code(), EXIT_BACKEND);
        let user: Error = separation::SeparationError::InfeasiblePlan("x".into()).into();
        assert_eq!(user.exit_code(), EXIT_USER);
    }
}
