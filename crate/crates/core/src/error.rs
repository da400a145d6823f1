use std::path::PathBuf;

/// Errors produced by the reconstruction library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("point outside the camera model (incidence angle {theta:.4} rad)")]
    OutOfModel { theta: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("optimizer did not converge after {iterations} iterations (cost {cost:e})")]
    NonConvergence { iterations: usize, cost: f64 },

    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    #[error("initialization failed: no image pair qualifies (best pair {best_pair:?} with {inliers} inliers)")]
    InitializationFailure {
        best_pair: Option<(usize, usize)>,
        inliers: usize,
    },

    #[error("registration of image {image} failed: {reason}")]
    RegistrationFailure { image: usize, reason: String },

    #[error("surface reconstruction failed: {0}")]
    ReconstructionFailure(String),

    #[error("texture atlas overflow: budget {budget} texels is too small, {required} required")]
    AtlasOverflow { budget: u32, required: u32 },

    #[error("invalid scene: {0}")]
    InvalidScene(String),

    #[error("export failed: {0}")]
    Export(String),

    #[error("parse error in {what} at line {line}: {message}")]
    Parse { what: String, line: usize, message: String },

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn parse(what: impl Into<String>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            what: what.into(),
            line,
            message: message.into(),
        }
    }

    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }
}
