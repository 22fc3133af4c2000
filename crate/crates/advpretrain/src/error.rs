//! Crate-wide error type.
//!
//! Every fallible operation returns [`Result`]. Variants carry enough
//! structure (op names, shapes, offsets) that callers can report a
//! failure without re-deriving context.

use std::fmt;

/// Alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes of the library.
#[derive(Debug)]
pub enum Error {
    /// Two tensors fed to `op` have incompatible shapes.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A single tensor fed to `op` has a shape the op cannot accept.
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    /// `backward` was called on a non-scalar node.
    NonScalarLoss { shape: Vec<usize> },
    /// `backward` was called twice on the same tape without a reset.
    BackwardTwice,
    /// `log` (or another domain-restricted op) saw an out-of-domain value.
    Domain {
        op: &'static str,
        index: usize,
        value: f64,
    },
    /// An index argument (class label, select index, ...) is out of range.
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    /// Architecture id not in the zoo.
    UnknownArch { arch: String },
    /// A forward pass asked for a task head the model does not carry.
    MissingHead { task: String },
    /// Pretext/classifier label outside the declared cardinality.
    InvalidLabel { label: usize, cardinality: usize },
    /// Image side not divisible by the requested grid.
    GridMismatch { side: usize, grid: usize },
    /// Permutation set request exceeds (k^2)!.
    PermSetTooLarge { requested: usize, max: usize },
    /// Attack loss became non-finite at the given step.
    NonFiniteLoss { step: usize },
    /// Config validation failures; every violation, not just the first.
    InvalidConfig { violations: Vec<String> },
    /// I/O failure with the path it happened on.
    Io {
        path: String,
        source: std::io::Error,
    },
    /// File does not start with the expected magic bytes.
    BadMagic {
        path: String,
        expected: [u8; 4],
        found: [u8; 4],
    },
    /// File version not understood by this build.
    UnsupportedVersion { path: String, found: u16 },
    /// File shorter than its header claims.
    Truncated {
        path: String,
        expected: u64,
        found: u64,
    },
    /// Stored digest does not match the recomputed one.
    DigestMismatch {
        path: String,
        expected: String,
        found: String,
    },
    /// Structured record is internally inconsistent.
    Corrupt { path: String, detail: String },
    /// Checkpoint was produced for a different architecture.
    ArchMismatch { expected: String, found: String },
    /// Catch-all precondition failure with a human-readable message.
    Invalid { what: String },
}

impl Error {
    /// Shorthand for [`Error::Invalid`].
    pub fn invalid(what: impl Into<String>) -> Self {
        Error::Invalid { what: what.into() }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch {lhs:?} vs {rhs:?}")
            }
            Error::InvalidShape { op, shape, reason } => {
                write!(f, "{op}: invalid shape {shape:?} ({reason})")
            }
            Error::NonScalarLoss { shape } => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
            Error::BackwardTwice => {
                write!(f, "backward already ran on this tape; build a fresh tape")
            }
            Error::Domain { op, index, value } => {
                write!(f, "{op}: value {value} at index {index} outside domain")
            }
            Error::IndexOutOfRange { op, index, len } => {
                write!(f, "{op}: index {index} out of range for length {len}")
            }
            Error::UnknownArch { arch } => write!(f, "unknown architecture id {arch:?}"),
            Error::MissingHead { task } => write!(f, "model has no head for task {task:?}"),
            Error::InvalidLabel { label, cardinality } => {
                write!(f, "label {label} outside cardinality {cardinality}")
            }
            Error::GridMismatch { side, grid } => {
                write!(f, "image side {side} not divisible by grid {grid}")
            }
            Error::PermSetTooLarge { requested, max } => {
                write!(f, "requested {requested} permutations, only {max} exist")
            }
            Error::NonFiniteLoss { step } => {
                write!(f, "attack loss became non-finite at step {step}")
            }
            Error::InvalidConfig { violations } => {
                writeln!(f, "invalid config ({} violations):", violations.len())?;
                for v in violations {
                    writeln!(f, "  - {v}")?;
                }
                Ok(())
            }
            Error::Io { path, source } => write!(f, "{path}: {source}"),
            Error::BadMagic {
                path,
                expected,
                found,
            } => write!(f, "{path}: bad magic {found:?}, expected {expected:?}"),
            Error::UnsupportedVersion { path, found } => {
                write!(f, "{path}: unsupported format version {found}")
            }
            Error::Truncated {
                path,
                expected,
                found,
            } => write!(f, "{path}: truncated, expected {expected} bytes, found {found}"),
            Error::DigestMismatch {
                path,
                expected,
                found,
            } => write!(f, "{path}: digest mismatch, expected {expected}, found {found}"),
            Error::Corrupt { path, detail } => write!(f, "{path}: corrupt ({detail})"),
            Error::ArchMismatch { expected, found } => {
                write!(f, "checkpoint architecture {found:?} does not match model {expected:?}")
            }
            Error::Invalid { what } => write!(f, "{what}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

/// Attach a path to a raw I/O error.
pub fn io_err(path: impl Into<String>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
