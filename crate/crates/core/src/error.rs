use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("axis {axis} out of range for rank {rank}")]
    Axis { axis: usize, rank: usize },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("embedding dimension {dim} is not divisible by {heads} heads")]
    HeadCount { dim: usize, heads: usize },

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(&'static str),

    #[error("degenerate torsion: collinear atoms")]
    DegenerateTorsion,

    #[error("no ATOM records found")]
    NoAtoms,

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("structure has no residues")]
    EmptyStructure,

    #[error("residue {0} is missing backbone atoms (N, CA, C)")]
    MissingBackboneAtoms(usize),

    #[error("sequence length {len} exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing ligand for binding-affinity prediction")]
    MissingLigand,

    #[error("empty ligand graph")]
    EmptyLigand,

    #[error("training diverged (non-finite loss) in batch {0:?}")]
    Diverged(Vec<String>),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Numeric failures, as opposed to bad input data or configuration.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. } | Error::Diverged(_) | Error::DegenerateInput(_)
        )
    }
}
