use std::fmt;
use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Pipeline stage an error originated in, attached by [`Error::in_stage`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Preprocess,
    Extract,
    Classify,
    Components,
    Prompts,
    Refine,
    Restore,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stage::Preprocess => "preprocess",
            Stage::Extract => "extract",
            Stage::Classify => "classify",
            Stage::Components => "components",
            Stage::Prompts => "prompts",
            Stage::Refine => "refine",
            Stage::Restore => "restore",
        };
        f.write_str(name)
    }
}

/// Coarse classification used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Backend,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("image {height}x{width} is smaller than one {patch}px patch")]
    TooSmall {
        height: usize,
        width: usize,
        patch: usize,
    },

    #[error("dimension mismatch: expected {expected:?}, found {found:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("dimensions {height}x{width} are not multiples of {patch}")]
    NotPatchAligned {
        height: usize,
        width: usize,
        patch: usize,
    },

    #[error("mask of size {height}x{width} matches neither the padded nor the token resolution")]
    UnrecognizedResolution { height: usize, width: usize },

    #[error("box is empty or lies outside the image content: {0}")]
    InvalidBox(String),

    #[error("unknown backend `{0}`")]
    UnknownBackend(String),

    #[error("weights for backend `{backend}` not found at {}; set the checkpoint path in the config file or via {env_var}", path.display())]
    MissingWeights {
        backend: String,
        path: PathBuf,
        env_var: String,
    },

    #[error("backend `{backend}` failed: {message}")]
    Backend { backend: String, message: String },

    #[error("encoder mismatch: expected `{expected}`, found `{found}`")]
    EncoderMismatch { expected: String, found: String },

    #[error("need at least {needed} content tokens to fit PCA, found {found}")]
    InsufficientTokens { needed: usize, found: usize },

    #[error("token features are degenerate (leading variance {variance:e}); PCA has no direction to fit")]
    RankDeficient { variance: f64 },

    #[error("label {0} is negative; instance masks must use nonnegative ids")]
    NegativeLabel(i64),

    #[error("dataset root {} is missing; expected layout:\n{layout}", root.display())]
    MissingRoot { root: PathBuf, layout: String },

    #[error("{count} orphaned files without a matching image or mask: {}", sample.join(", "))]
    Orphans { count: usize, sample: Vec<String> },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("malformed file {}: {message}", path.display())]
    Format { path: PathBuf, message: String },

    #[error("{stage}: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn in_stage(self, stage: Stage) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Stage { source, .. } => source.kind(),
            Error::UnknownBackend(_) => ErrorKind::Usage,
            Error::MissingWeights { .. } | Error::Backend { .. } => ErrorKind::Backend,
            _ => ErrorKind::Data,
        }
    }

    /// Stage tag of the outermost stage wrapper, if any.
    pub fn stage(&self) -> Option<Stage> {
        match self {
            Error::Stage { stage, .. } => Some(*stage),
            _ => None,
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: Stage) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: Stage) -> Result<T> {
        self.map_err(|e| e.in_stage(stage))
    }
}
