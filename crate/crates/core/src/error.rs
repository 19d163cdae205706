use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("sample {id}: size mismatch, expected {expected} bytes, found {found}")]
    SizeMismatch { id: String, expected: u64, found: u64 },

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("sample {id}: non-finite value at frame {frame}, channel {channel}")]
    NonFinite { id: String, frame: usize, channel: usize },

    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("invalid config: {0}")]
    Config(String),

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("sequence of {frames} frames is shorter than one downsampling window ({ratio})")]
    TooShort { frames: usize, ratio: usize },

    #[error("token {token} out of range (vocabulary {size})")]
    TokenOutOfRange { token: u32, size: usize },

    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint missing: {0}")]
    CheckpointMissing(PathBuf),

    #[error("[{stage}] {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage { stage, source: Box::new(self) }
    }
}
