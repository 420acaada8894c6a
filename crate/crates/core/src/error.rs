use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum CodecError {
    #[error("malformed line: {0:?}")]
    MalformedLine(String),
    #[error("payload of {0} bytes exceeds the CAN 2.0 limit of 8")]
    PayloadTooLong(usize),
    #[error("bad hex: {0:?}")]
    BadHex(String),
    #[error("bad timestamp: {0:?}")]
    BadTimestamp(String),
    #[error("arbitration id {aid:#X} out of range (extended: {extended})")]
    AidOutOfRange { aid: u32, extended: bool },
    #[error("line {line}: {source}")]
    AtLine {
        line: usize,
        #[source]
        source: Box<CodecError>,
    },
    #[error("i/o: {0}")]
    Io(String),
}

impl CodecError {
    pub(crate) fn at_line(self, line: usize) -> Self {
        Self::AtLine {
            line,
            source: Box::new(self),
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum PipelineError {
    #[error("capture {0:?} contains no frames")]
    EmptyCapture(String),
    #[error("cubic spline needs at least 2 points, got {0}")]
    TooShort(usize),
    #[error("byte pairs never observed in the stream: {0:?}")]
    UnknownMember(Vec<String>),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ClusterError {
    #[error("series {0} has zero variance")]
    ConstantSeries(String),
    #[error("series length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("row {0} of the affinity matrix sums to zero")]
    DegenerateRow(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum DiffusionError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("only {found} numerically nonzero eigenvalues, need {needed}; reduce m or gamma")]
    RankCollapse { found: usize, needed: usize },
    #[error("observation is beyond kernel reach of every landmark")]
    ZeroKernelRow,
    #[error("no linear region in the kernel-sum curve")]
    NoLinearRegion,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum DetectError {
    #[error("observation at t={got} precedes previous observation at t={previous}")]
    OutOfOrder { previous: f64, got: f64 },
    #[error("holdout has {0} observations, need at least {1}")]
    InsufficientHoldout(usize, usize),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum SimulateError {
    #[error("attack window [{start}, {end}] outside capture of {duration} s or overlapping another")]
    WindowOutOfRange { start: f64, end: f64, duration: f64 },
    #[error("attack target {0} does not occur in the capture")]
    UnknownTarget(String),
    #[error("invalid vehicle: {0}")]
    InvalidVehicle(String),
    #[error("invalid attack: {0}")]
    InvalidAttack(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

/// Crate-wide error, used where operations from several modules compose.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Detect(#[from] DetectError),
    #[error(transparent)]
    Simulate(#[from] SimulateError),
    #[error("{path}: {message}")]
    Artifact { path: String, message: String },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True when the error stems from bad input rather than a failed computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Codec(_) | Error::Artifact { .. } | Error::Json(_) | Error::Io(_)
        ) || matches!(
            self,
            Error::Pipeline(PipelineError::InvalidParameter(_))
                | Error::Cluster(ClusterError::InvalidParameter(_))
                | Error::Diffusion(DiffusionError::InvalidParameter(_))
                | Error::Detect(DetectError::InvalidParameter(_))
                | Error::Simulate(
                    SimulateError::InvalidVehicle(_)
                        | SimulateError::InvalidAttack(_)
                        | SimulateError::WindowOutOfRange { .. }
                        | SimulateError::UnknownTarget(_)
                )
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
