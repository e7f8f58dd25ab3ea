use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {context}: {detail}")]
    ShapeMismatch { context: String, detail: String },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("matrix is numerically rank deficient (column {column})")]
    RankDeficient { column: usize },

    #[error("matrix is not symmetric (asymmetry {asymmetry:.3e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("Jacobi eigensolver did not converge after {sweeps} sweeps")]
    NoConvergence { sweeps: usize },

    #[error("input `{0}` is not bound")]
    UnboundInput(String),

    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("backward called before forward")]
    BackwardBeforeForward,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("a positive definite weight needs a square shape, got {rows}x{cols}")]
    IncompatibleShape { rows: usize, cols: usize },

    #[error("degenerate shape {0:?}")]
    DegenerateShape(Vec<usize>),

    #[error("invalid convolution geometry: {0}")]
    InvalidGeometry(String),

    #[error("initial value is not a point of {0}")]
    InvalidInitialValue(String),

    #[error("parameter `{0}` appears more than once in the model")]
    DuplicateParameter(String),

    #[error("operation `{op}` is not defined on {manifold}")]
    Unsupported { op: &'static str, manifold: String },

    #[error("parameter has no gradient")]
    MissingGradient,

    #[error("line search failed after {backtracks} backtracks")]
    LineSearchFailed { backtracks: usize },

    #[error("parameter `{name}`: {source}")]
    Parameter {
        name: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid value for `{field}`: {message}")]
    Validation { field: String, message: String },

    #[error("malformed CSV at row {row}: {message}")]
    MalformedCsv { row: usize, message: String },

    #[error("label {label} at row {row} is out of range for {classes} classes")]
    LabelOutOfRange {
        row: usize,
        label: usize,
        classes: usize,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            detail: detail.into(),
        }
    }

    /// The innermost error, looking through per-parameter wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Parameter { source, .. } => source.root(),
            e => e,
        }
    }

    /// Config problems map to exit code 2, everything else to 1.
    pub fn is_config_error(&self) -> bool {
        matches!(self, Error::Parse { .. } | Error::Validation { .. })
    }
}
