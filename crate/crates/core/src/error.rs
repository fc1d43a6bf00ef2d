use alloc::string::String;
use core::fmt;

/// Error type shared by every module of the core crate.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Shapes or extents that do not line up.
    Dimension(String),
    /// A coordinate or index outside its valid range.
    Index(String),
    /// NaN or infinite values, optionally tagged with the layer that produced them.
    Numeric { context: String, layer: Option<usize> },
    /// An invalid argument value.
    Argument(String),
    /// Values outside the mathematical domain of an operation.
    Domain(String),
    /// A mask row that selects no key at all.
    DegenerateMask { row: usize },
    /// The schedule has `alpha(t) = 0`, so the clean estimate is undefined.
    SingularSchedule { timestep: u32 },
    /// Model, assignment and data disagree about their configuration.
    Config(String),
    /// Misuse of the autodiff tape.
    Internal(String),
}

pub type Result<T> = core::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric {
            context: msg.into(),
            layer: None,
        }
    }

    /// Short machine-readable category name.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Index(_) => "index",
            Error::Numeric { .. } => "numeric",
            Error::Argument(_) => "argument",
            Error::Domain(_) => "domain",
            Error::DegenerateMask { .. } => "degenerate_mask",
            Error::SingularSchedule { .. } => "singular_schedule",
            Error::Config(_) => "config",
            Error::Internal(_) => "internal",
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension(m) => write!(f, "dimension error: {m}"),
            Error::Index(m) => write!(f, "index error: {m}"),
            Error::Numeric {
                context,
                layer: Some(l),
            } => write!(f, "numeric error in layer {l}: {context}"),
            Error::Numeric { context, .. } => write!(f, "numeric error: {context}"),
            Error::Argument(m) => write!(f, "argument error: {m}"),
            Error::Domain(m) => write!(f, "domain error: {m}"),
            Error::DegenerateMask { row } => write!(f, "mask row {row} selects no key"),
            Error::SingularSchedule { timestep } => {
                write!(f, "alpha({timestep}) is zero, clean estimate undefined")
            }
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Internal(m) => write!(f, "internal error: {m}"),
        }
    }
}

impl core::error::Error for Error {}
