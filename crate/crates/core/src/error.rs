use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("timestep {t} outside schedule range [{lo}, {hi}]")]
    TimestepOutOfRange { t: usize, lo: usize, hi: usize },
    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("training diverged at step {step}: loss = {loss}")]
    DivergedTraining { step: usize, loss: f64 },
    #[error("frozen base parameters changed during control-branch training")]
    FrozenViolation,
    #[error("guidance variant requires network that is not available: {0}")]
    MissingNetwork(String),
    #[error("figure spec out of range: {0}")]
    OutOfRangeSpec(String),
    #[error("no figure found in raster (segmented mass {mass} below threshold)")]
    NoFigureFound { mass: f64 },
    #[error("degenerate point configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("insufficient samples: need at least {need}, got {got}")]
    InsufficientSamples { need: usize, got: usize },
    #[error("corrupt model file, field `{field}`: {message}")]
    CorruptModelFile { field: String, message: String },
    #[error("rotation not orthonormal (deviation {deviation})")]
    NonOrthonormalRotation { deviation: f64 },
    #[error("config error at line {line}: {message}")]
    ConfigError { line: usize, message: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
