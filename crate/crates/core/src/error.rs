use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error(
        "reference score {score} for ({speaker}, {part}) is not on the 0.5 grid in [2.0, 5.5]"
    )]
    OffGridReference {
        speaker: String,
        part: String,
        score: f64,
    },
    #[error("non-finite score {0}")]
    NonFiniteScore(f64),
    #[error("invalid part {0:?}; expected one of 1, 3, 4, 5")]
    InvalidPart(String),
    #[error("duplicate key ({speaker}, {part}) in {source_name}")]
    DuplicateKey {
        speaker: String,
        part: String,
        source_name: String,
    },
    #[error("no (speaker, part) key is shared by the inputs")]
    EmptyJoin,
    #[error("references are present for some rows but not others")]
    MixedReferences,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    EmptyInput,
    #[error("input has zero variance")]
    ConstantInput,
    #[error("dataset has no reference scores")]
    NoReferences,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("speaker {speaker} is missing part {part}")]
    MissingPart { speaker: String, part: String },
    #[error("speaker {speaker} has more than one score for part {part}")]
    DuplicatePart { speaker: String, part: String },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("zero-norm vector in cosine similarity")]
    ZeroNormVector,
    #[error("target {0} is not one of the classifier levels")]
    OffGridTarget(f64),
    #[error("forward cache does not match the parameters passed to backward")]
    StaleCache,
    #[error("loss became non-finite at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("no rows in bin")]
    EmptyBin,
    #[error("calibration file version {found} is not supported (expected {expected})")]
    CalibrationVersionMismatch { found: u32, expected: u32 },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    /// True for errors caused by malformed or unreadable input files rather
    /// than by content that fails validation.
    pub fn is_parse_or_io(&self) -> bool {
        matches!(self, Error::Parse(_) | Error::Io(_))
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
