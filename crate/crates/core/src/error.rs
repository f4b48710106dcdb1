use std::fmt;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by the lab's numeric and pipeline layers.
#[derive(Clone, Debug, PartialEq)]
pub enum Error {
    /// Tensor shapes are incompatible for the requested operation.
    Dimension { context: &'static str, left: Vec<usize>, right: Vec<usize> },
    /// A constructor received data whose length does not match its shape.
    DataLength { expected: usize, got: usize },
    /// An operation produced or received a non-finite value.
    NonFinite { context: &'static str },
    /// A scalar argument fell outside its admissible range.
    Domain { context: &'static str, value: f64 },
    /// A contract on the caller was violated (e.g. non-scalar loss).
    Contract { context: &'static str },
    /// A prompt referenced a token id that is not in the vocabulary.
    Vocabulary { token_id: usize },
    /// Two prompts do not define a usable editing direction.
    IllPosedDirection { differing_slots: usize },
    /// Two edits in one plan touch the same slot.
    SlotConflict { slot: usize },
    /// No mixture component is consistent with the requested condition.
    EmptyCondition,
    /// Training produced a non-finite loss.
    TrainingDiverged { step: usize },
    /// A latent update produced a non-finite gradient.
    OptimizationDiverged { iteration: usize },
    /// An evaluation routine was configured with unusable inputs.
    Configuration { context: String },
    /// Underlying I/O failure, carried as a message.
    Io { message: String },
    /// A serialized file did not match the expected format.
    Format { context: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension { context, left, right } => {
                write!(f, "{context}: incompatible shapes {left:?} and {right:?}")
            }
            Error::DataLength { expected, got } => {
                write!(f, "data length mismatch: expected {expected}, got {got}")
            }
            Error::NonFinite { context } => write!(f, "{context}: non-finite value"),
            Error::Domain { context, value } => {
                write!(f, "{context}: value {value} outside admissible range")
            }
            Error::Contract { context } => write!(f, "contract violation: {context}"),
            Error::Vocabulary { token_id } => write!(f, "unknown token id {token_id}"),
            Error::IllPosedDirection { differing_slots } => write!(
                f,
                "editing direction needs exactly one differing slot, got {differing_slots}"
            ),
            Error::SlotConflict { slot } => write!(f, "two edits touch slot {slot}"),
            Error::EmptyCondition => write!(f, "no mixture component satisfies the condition"),
            Error::TrainingDiverged { step } => write!(f, "training loss non-finite at step {step}"),
            Error::OptimizationDiverged { iteration } => {
                write!(f, "latent update non-finite at iteration {iteration}")
            }
            Error::Configuration { context } => write!(f, "configuration error: {context}"),
            Error::Io { message } => write!(f, "io error: {message}"),
            Error::Format { context } => write!(f, "format error: {context}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io { message: e.to_string() }
    }
}
