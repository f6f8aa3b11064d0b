use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T> = core::result::Result<T, DexError>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DexError {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("numeric error in {op}: non-finite value")]
    Numeric { op: &'static str },
    #[error("degenerate input to {op}: {detail}")]
    Degenerate { op: &'static str, detail: String },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(
        "non-finite loss at step {step}: self={loss_self}, co={loss_co:?}, bal={loss_bal:?}"
    )]
    NonFiniteLoss {
        step: usize,
        loss_self: f64,
        loss_co: Vec<f64>,
        loss_bal: Vec<f64>,
    },
}

impl DexError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        DexError::Shape {
            op,
            detail: detail.into(),
        }
    }
}
