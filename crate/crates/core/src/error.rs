use alloc::string::String;
use core::fmt;

/// Errors raised by the model core.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Tensor shapes do not satisfy an operation's contract.
    InvalidShape(String),
    /// A hyperparameter combination is not allowed.
    InvalidConfig(String),
    /// Input values are outside their allowed domain (e.g. a non-binary mask).
    InvalidData(String),
    /// A word outside the closed vocabulary.
    Vocabulary(String),
    /// A token sequence exceeds the positional table.
    Length { len: usize, max: usize },
    /// An API was used outside its contract (e.g. differentiating a non-scalar).
    InvalidUse(String),
    /// A gradient or loss contained NaN or infinity.
    NonFinite(String),
    /// The scene sampler ran out of attempts.
    Generation { seed: u64, attempts: usize },
}

pub type Result<T> = core::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::InvalidShape(msg) => write!(f, "invalid shape: {msg}"),
            Self::InvalidConfig(msg) => write!(f, "invalid config: {msg}"),
            Self::InvalidData(msg) => write!(f, "invalid data: {msg}"),
            Self::Vocabulary(word) => write!(f, "word {word:?} is not in the vocabulary"),
            Self::Length { len, max } => {
                write!(f, "sequence length {len} exceeds the maximum of {max}")
            }
            Self::InvalidUse(msg) => write!(f, "invalid use: {msg}"),
            Self::NonFinite(what) => write!(f, "non-finite value in {what}"),
            Self::Generation { seed, attempts } => write!(
                f,
                "no unambiguous scene found for seed {seed:#018x} after {attempts} attempts"
            ),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::Error::InvalidShape(alloc::format!($($arg)*))
    };
}
pub(crate) use shape_err;
