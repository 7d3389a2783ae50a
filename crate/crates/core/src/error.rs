use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand extents do not conform.
    #[error("shape error: {0}")]
    Shape(String),

    /// A configuration value is invalid or refers to nothing.
    #[error("config error: {0}")]
    Config(String),

    /// A compaction plan would produce an invalid network.
    #[error("structural error in layer {layer}: {reason}")]
    Structural { layer: String, reason: String },

    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch} (step {step}): loss is {loss}")]
    Divergence { epoch: usize, step: usize, loss: f64 },

    /// Two kernels computed different answers for the same product.
    #[error("correctness error: {0}")]
    Correctness(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
