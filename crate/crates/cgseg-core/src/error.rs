use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

/// Errors surfaced by tensor, autodiff, model, and data operations.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Two tensors (or a tensor and an expected layout) disagree in shape.
    /// Both shapes are carried so the message can show them.
    ShapeMismatch {
        op: String,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// Structurally invalid argument, configuration, or state.
    Invalid(String),
    /// A primitive produced NaN or Inf from finite inputs.
    NonFinite { op: String },
    /// A named channel required by an operation is absent.
    MissingChannel(String),
    /// A channel with this name already exists on the sample.
    DuplicateChannel(String),
    /// A label value does not fit the class count; carries the pixel coordinate.
    LabelOutOfRange {
        row: usize,
        col: usize,
        value: u8,
        class_count: usize,
    },
    /// The gradient map is missing an entry for this parameter.
    MissingGradient(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch between {lhs:?} and {rhs:?}")
            }
            Error::Invalid(msg) => write!(f, "invalid argument: {msg}"),
            Error::NonFinite { op } => write!(f, "{op}: produced a non-finite value"),
            Error::MissingChannel(name) => write!(f, "missing channel {name}"),
            Error::DuplicateChannel(name) => write!(f, "channel {name} already present"),
            Error::LabelOutOfRange {
                row,
                col,
                value,
                class_count,
            } => write!(
                f,
                "label {value} at pixel ({row}, {col}) is out of range for {class_count} classes"
            ),
            Error::MissingGradient(name) => write!(f, "no gradient for parameter {name}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn shape_mismatch(op: &str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        op: String::from(op),
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::Invalid(msg.into())
}
