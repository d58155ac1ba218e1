use std::fmt;
use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Training phase a numerical failure is attributed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Trial,
    Reservoir,
    Stage1,
    Stage2,
    Reference,
    Autonomous,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Phase::Trial => "trial",
            Phase::Reservoir => "reservoir",
            Phase::Stage1 => "stage1",
            Phase::Stage2 => "stage2",
            Phase::Reference => "reference",
            Phase::Autonomous => "autonomous",
        };
        f.write_str(s)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("non-finite value in {what} at index {index}")]
    NonFinite { what: &'static str, index: usize },

    #[error("length mismatch: need {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("dimension mismatch in {what}: expected {expected}, got {actual}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("degenerate matrix: {0}")]
    DegenerateMatrix(&'static str),

    #[error("regularised normal matrix is not positive definite")]
    SingularSystem,

    #[error("trial solution diverged: {0}")]
    TrialDiverged(Box<Error>),

    #[error("{phase}: {source}")]
    InPhase {
        phase: Phase,
        #[source]
        source: Box<Error>,
    },

    #[error("unknown system `{0}` (expected harmonic, vdp or lorenz)")]
    UnknownSystem(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn in_phase(self, phase: Phase) -> Self {
        match self {
            e @ Error::InPhase { .. } => e,
            e => Error::InPhase {
                phase,
                source: Box::new(e),
            },
        }
    }

    /// True for failures of the numerics (as opposed to usage, config or IO).
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NonFinite { .. }
            | Error::SingularSystem
            | Error::DegenerateMatrix(_)
            | Error::TrialDiverged(_) => true,
            Error::InPhase { source, .. } => source.is_numerical(),
            _ => false,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Returns `NonFinite` for the first non-finite entry of `values`.
pub(crate) fn ensure_finite<'a>(
    what: &'static str,
    values: impl IntoIterator<Item = &'a f64>,
) -> Result<()> {
    match values.into_iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { what, index }),
        None => Ok(()),
    }
}
