use alloc::string::String;

/// Errors raised by the engine and everything built on top of it.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("training diverged at stage {stage}, epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { stage: u8, epoch: usize, step: usize, loss: f64 },
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn shape_err<T>(op: &'static str, detail: String) -> Result<T> {
    Err(Error::Shape { op, detail })
}
