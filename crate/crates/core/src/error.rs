use thiserror::Error;

/// Errors raised anywhere in the crate.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("negative mass {mass} at atom {atom:?}")]
    NegativeMass { atom: Vec<usize>, mass: f64 },
    #[error("masses sum to {sum}, expected 1 (tolerance 1e-12)")]
    SumNotOne { sum: f64 },
    #[error("atom {0:?} listed more than once")]
    DuplicateAtom(Vec<usize>),
    #[error("atom {0:?} does not fit the schema")]
    AtomOutOfRange(Vec<usize>),
    #[error("contamination weight {0} outside [0, 1]")]
    EpsOutOfRange(f64),
    #[error("functional could not be evaluated along the contamination path: {0}")]
    EvalFailure(String),
    #[error("unknown variable `{0}`")]
    UnknownVariable(String),
    #[error("conditioning event {0} has zero mass")]
    ZeroConditioningMass(String),
    #[error("division by zero in {0}")]
    DivideByZero(String),

    #[error("syntax error at line {line}, column {column}: {message}")]
    SyntaxError {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("unbound variable `{name}` at line {line}, column {column}")]
    UnboundVariable {
        name: String,
        line: usize,
        column: usize,
    },
    #[error("bound variable `{name}` redeclared at line {line}, column {column}")]
    RedeclaredBoundVariable {
        name: String,
        line: usize,
        column: usize,
    },
    #[error("no derivative rule registered for `{0}`")]
    UnsupportedNode(String),
    #[error("bound variable `{0}` has no resolvable range in this schema")]
    UnresolvedRange(String),
    #[error("evaluation failed at atom {atom:?}: {source}")]
    AtAtom { atom: Vec<usize>, source: Box<Error> },

    #[error("unknown functional `{0}`")]
    UnknownFunctional(String),
    #[error("positivity violation: {name} = {value} below floor {floor}")]
    PositivityViolation { name: String, value: f64, floor: f64 },
    #[error("nuisance `{0}` missing from bundle")]
    MissingNuisance(String),
    #[error("row is missing required column `{0}`")]
    MissingColumn(String),
    #[error("quadrature failed: {0}")]
    QuadratureFailure(String),
    #[error("plug-in estimator not available for `{0}`")]
    PluginUnavailable(String),

    #[error("empty data")]
    EmptyData,
    #[error("k = {k} exceeds the {n} available training rows")]
    KTooLarge { k: usize, n: usize },
    #[error("tuning grid is empty")]
    GridEmpty,
    #[error("invalid learner specification `{0}`")]
    InvalidLearner(String),
    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("fold count {k} outside [2, {n}]")]
    KOutOfRange { k: usize, n: usize },
    #[error("fold {fold}: {source}")]
    FoldTooSmallForLearner { fold: usize, source: Box<Error> },
    #[error("denominator estimate {value} below floor {floor} (weak instrument)")]
    WeakDenominator { value: f64, floor: f64 },
    #[error("truth unavailable: {0}")]
    TruthUnavailable(String),

    #[error("unknown DGP `{0}`")]
    UnknownDgp(String),
    #[error("invalid study config: {0}")]
    InvalidConfig(String),
    #[error("I/O: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn at_atom(self, atom: &[usize]) -> Error {
        Error::AtAtom {
            atom: atom.to_vec(),
            source: Box::new(self),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Io(e.to_string())
    }
}
