//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    // ----- graph construction / validation -----
    #[error("graph spec invalid: {reason}")]
    InvalidSpec { reason: String },

    #[error("video shorter than one chunk: {frame_count} frames < chunk length {chunk_len}")]
    VideoShorterThanChunk { frame_count: usize, chunk_len: usize },

    #[error("gap between chunks: stride {stride} exceeds chunk length {chunk_len}")]
    ChunkGap { stride: usize, chunk_len: usize },

    #[error("chunking requires chunk length >= 1 and stride >= 1 (got chunk_len {chunk_len}, stride {stride})")]
    DegenerateChunk { chunk_len: usize, stride: usize },

    #[error("feature count mismatch: expected {expected} steps x {expected_streams} streams, got {got_steps} x {got_streams}")]
    FeatureShapeMismatch {
        expected: usize,
        expected_streams: usize,
        got_steps: usize,
        got_streams: usize,
    },

    #[error("feature dimension mismatch at (t={t}, k={k}): got {got}, expected {expected}")]
    FeatureDimMismatch { t: usize, k: usize, got: usize, expected: usize },

    #[error("non-finite feature entry at (t={t}, k={k}, i={i})")]
    NonFiniteFeature { t: usize, k: usize, i: usize },

    #[error("label out of range at (t={t}, k={k}): {label} >= label size {size}")]
    LabelOutOfRange { t: usize, k: usize, label: usize, size: usize },

    #[error("assignment shape mismatch: expected {expected_steps} steps x {expected_streams} streams, got {got_steps} x {got_streams}")]
    AssignmentShapeMismatch {
        expected_steps: usize,
        expected_streams: usize,
        got_steps: usize,
        got_streams: usize,
    },

    #[error("joint state space too large for exact enumeration: {states} states > cap {cap}")]
    StateSpaceTooLarge { states: u128, cap: u64 },

    // ----- energy model -----
    #[error("model and instance disagree on the graph spec")]
    SpecMismatch,

    #[error("node index out of range: (t={t}, k={k})")]
    NodeOutOfRange { t: usize, k: usize },

    #[error("pairwise energy requested between a node and itself at (t={t}, k={k})")]
    SelfPair { t: usize, k: usize },

    #[error("no pairwise terms in unary-only mode")]
    NoPairwiseTerms,

    #[error("temporal edge (t={t} != t'={t_prime}) requested in spatial-only mode")]
    TemporalEdgeInSpatialMode { t: usize, t_prime: usize },

    #[error("kernel bandwidth must be positive, got {sigma}")]
    InvalidBandwidth { sigma: f64 },

    #[error("pairwise rank {rank} must be >= 1 and < smallest label-set size {min_labels}")]
    RankOutOfRange { rank: usize, min_labels: usize },

    #[error("prior embedding table for stream {k} has {rows} rows, expected {expected} (one per label)")]
    PriorTableShape { k: usize, rows: usize, expected: usize },

    #[error("model parameter tensor {name:?} has {got} values, expected {expected}")]
    ParamShapeMismatch { name: String, got: usize, expected: usize },

    #[error("unknown parameter tensor {name:?}")]
    UnknownParam { name: String },

    // ----- inference -----
    #[error("marginal vector at (t={t}, k={k}) is not a distribution: {reason}")]
    InvalidMarginal { t: usize, k: usize, reason: String },

    #[error("damping must lie in [0, 1), got {damping}")]
    InvalidDamping { damping: f64 },

    // ----- learning -----
    #[error("instance has no gold labels; supervised loss needs them")]
    MissingGold,

    #[error("non-finite loss on instance {instance} of batch {batch}")]
    NonFiniteLoss { batch: usize, instance: usize },

    #[error("non-finite gradient in parameter tensor {name:?}")]
    NonFiniteGradient { name: String },

    #[error("training set is empty")]
    EmptyDataset,

    #[error("invalid training config: {reason}")]
    InvalidTrainConfig { reason: String },

    // ----- synthetic generator -----
    #[error("invalid synthetic config: {reason}")]
    InvalidSynthConfig { reason: String },

    // ----- evaluation -----
    #[error("degenerate box: x1 {x1} >= x2 {x2} or y1 {y1} >= y2 {y2}")]
    DegenerateBox { x1: f64, y1: f64, x2: f64, y2: f64 },

    #[error("trajectory must cover at least one frame")]
    EmptyTrajectory,

    #[error("chunk groups are not ordered by start frame: chunk {index} starts at {start}, previous at {prev_start}")]
    UnorderedChunks { index: usize, start: usize, prev_start: usize },

    #[error("localized detection needs subject and object trajectories; {side} trajectory missing on {what} for video {video:?}")]
    MissingTrajectory { video: String, what: &'static str, side: &'static str },

    #[error("recognition needs one prediction per ground-truth instance; {got} predictions vs {expected} instances")]
    RecognitionCountMismatch { got: usize, expected: usize },

    // ----- files / serialization -----
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("unsupported schema tag {got:?}, expected {expected:?}")]
    SchemaMismatch { got: String, expected: String },

    #[error("{0}")]
    Config(String),
}
