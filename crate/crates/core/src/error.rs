use std::path::PathBuf;

/// Crate-wide error type.
///
/// Variants are grouped by pipeline concern so callers (and the CLI exit-code
/// mapping) can distinguish validation failures from runtime stage errors.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest parse error at line {line}: {message}")]
    ManifestParse { line: usize, message: String },

    #[error("duplicate clip_id {0:?}")]
    DuplicateClip(String),

    #[error("conflicting records for clip_id {0:?}: same id, different content")]
    ConflictingClip(String),

    #[error("invalid record {clip_id:?}: field {field}: {message}")]
    InvalidRecord {
        clip_id: String,
        field: &'static str,
        message: String,
    },

    #[error("unknown pipeline stage {0:?}")]
    UnknownStage(String),

    #[error("contradictory decision for clip {clip_id:?} at stage {stage}: already recorded")]
    ContradictoryDecision { clip_id: String, stage: String },

    #[error("clip {clip_id:?}: frame file missing on disk: {path}")]
    MissingFrame { clip_id: String, path: PathBuf },

    #[error("clip {clip_id:?}: insufficient frames (got {got}, need at least {need})")]
    InsufficientFrames {
        clip_id: String,
        got: usize,
        need: usize,
    },

    #[error("image dimension mismatch: {expected} vs {actual}")]
    DimensionMismatch { expected: String, actual: String },

    #[error("image {width}x{height} too small: need at least {need} on each side")]
    ImageTooSmall { width: u32, height: u32, need: u32 },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("cosine similarity undefined for a zero-norm vector")]
    ZeroNormVector,

    #[error("embedding provider has no vector for (clip {clip_id:?}, frame {frame_index})")]
    MissingEmbedding { clip_id: String, frame_index: u32 },

    #[error("transport failure after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },

    #[error("malformed service response: {message}")]
    MalformedResponse { message: String },

    #[error("point behind camera plane (z_cam = {z:.6})")]
    BehindCamera { z: f64 },

    #[error("trajectory length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("prediction set does not cover the checklist: {message}")]
    PredictionMismatch { message: String },

    #[error("no physics-compliant winner: every candidate is tier-1 vetoed")]
    AllVetoed,

    #[error("comparator is inconsistent: loser bracket selected the champion")]
    InconsistentComparator,

    #[error("invalid config: {field}: {message}")]
    InvalidConfig { field: String, message: String },

    #[error("infeasible sampling plan: {0}")]
    InfeasiblePlan(String),

    #[error("plan key {0:?} absent from manifest")]
    MissingPlanKey(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("stage {stage} failed on clip {clip_id:?}: {source}")]
    Stage {
        stage: String,
        clip_id: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by invalid inputs or configuration, as opposed
    /// to runtime stage failures. The CLI maps these to exit code 1.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::ManifestParse { .. }
                | Error::DuplicateClip(_)
                | Error::ConflictingClip(_)
                | Error::InvalidRecord { .. }
                | Error::UnknownStage(_)
                | Error::ContradictoryDecision { .. }
                | Error::InvalidConfig { .. }
                | Error::PredictionMismatch { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
