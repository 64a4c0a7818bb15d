use thiserror::Error;

use crate::config::ConfigError;
use crate::gp_preint::GpError;
use crate::gp_prior::PriorError;
use crate::graph::GraphError;
use crate::imu_preint::ImuError;
use crate::io::FormatError;
use crate::metrics::MetricsError;
use crate::sim::SimError;
use crate::visual::VisualError;

/// Top-level error for the pipeline and the CLI.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error(transparent)]
    Imu(#[from] ImuError),
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Visual(#[from] VisualError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Configuration problems are reported separately from runtime failures.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
