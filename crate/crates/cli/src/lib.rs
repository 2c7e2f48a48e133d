//! Command-line pipeline: data generation, analysis, pretraining, tuning,
//! inference, evaluation and the seeds × regimes matrix.

pub mod commands;
pub mod config;
pub mod matrix;

use std::path::{Path, PathBuf};

use mcrec_core::tune::Regime;

pub use config::{Ablations, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing artifact: {0}")]
    Missing(String),

    #[error("io error on {0}: {1}")]
    Io(PathBuf, #[source] std::io::Error),

    #[error(transparent)]
    Core(#[from] mcrec_core::Error),
}

impl CliError {
    /// 2 configuration, 3 missing artifact, 4 non-finite numbers, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        use mcrec_core::Error as E;
        match self {
            CliError::Config(_) | CliError::Core(E::Config { .. }) => 2,
            CliError::Missing(_) | CliError::Core(E::MissingArtifact(_)) => 3,
            CliError::Core(E::NonFinite(_)) => 4,
            _ => 1,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Directory layout under the output root.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn analysis(&self) -> PathBuf {
        self.root.join("analysis")
    }

    pub fn pretrain(&self, variant: &str) -> PathBuf {
        self.root.join("pretrain").join(variant)
    }

    pub fn tune(&self, variant: &str, regime: Regime) -> PathBuf {
        self.root.join("tune").join(variant).join(regime.as_str())
    }

    /// The model store inside a tuning directory.
    pub fn store(&self, variant: &str, regime: Regime) -> PathBuf {
        self.tune(variant, regime).join(STORE_DIR)
    }

    pub fn eval(&self, variant: &str) -> PathBuf {
        self.root.join("eval").join(variant)
    }

    pub fn matrix(&self) -> PathBuf {
        self.root.join("matrix")
    }
}

pub const STORE_DIR: &str = "store";

pub(crate) fn require(path: &Path, what: &str) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Missing(format!("{what} ({})", path.display())))
    }
}
