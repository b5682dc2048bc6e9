//! Command implementations behind the `sadm` binary.

pub mod commands;
pub mod config;

pub use config::RunConfig;

/// Errors surfaced by commands, each with a stable process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration: {0}")]
    Config(String),

    #[error("{context}: {source}")]
    Core {
        context: String,
        #[source]
        source: sadm_core::Error,
    },

    #[error("validation failed: {0}")]
    Validation(String),
}

impl CliError {
    pub fn core(context: impl Into<String>) -> impl FnOnce(sadm_core::Error) -> CliError {
        let context = context.into();
        move |source| CliError::Core { context, source }
    }

    /// Exit codes:
    /// 2 usage, 3 configuration or parameter, 4 IO, 5 checkpoint,
    /// 6 mask or geometry, 7 training divergence, 8 benchmark suite,
    /// 9 coverage, 10 failed validation, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        use sadm_core::Error as E;
        match self {
            CliError::Config(_) => 3,
            CliError::Validation(_) => 10,
            CliError::Core { source, .. } => match source {
                E::Parameter(_) | E::Json(_) => 3,
                E::Io(_) | E::Image(_) => 4,
                E::Checkpoint(_) | E::MissingTensor(_) => 5,
                E::InvalidMask { .. }
                | E::InvalidGeometry(_)
                | E::MaskResolution { .. }
                | E::DegeneratePartition(_)
                | E::EmptyKeys => 6,
                E::Divergence { .. } => 7,
                E::SuiteParse(_) | E::SuiteInvariant { .. } => 8,
                E::Coverage(_) => 9,
                E::Shape(_) => 1,
            },
        }
    }
}

pub const EXIT_USAGE: i32 = 2;
