use thiserror::Error;

/// Errors produced by archive IO, model evaluation, and the editing pipeline.
#[derive(Debug, Error)]
pub enum Error {
    // --- tensor archives -------------------------------------------------
    #[error("duplicate tensor name: {0:?}")]
    DuplicateTensor(String),
    #[error("tensor name must be non-empty")]
    EmptyTensorName,
    #[error("shape/size mismatch for {name:?}: shape {shape:?} does not match {len} values")]
    ShapeSizeMismatch {
        name: String,
        shape: Vec<usize>,
        len: usize,
    },
    #[error("non-finite value in tensor {0:?}")]
    NonFinite(String),
    #[error("truncated archive: {0}")]
    Truncated(String),
    #[error("malformed archive header: {0}")]
    MalformedHeader(String),
    #[error("unsupported dtype {dtype:?} for tensor {name:?} (only \"f32\" is supported)")]
    UnsupportedDtype { name: String, dtype: String },
    #[error("bad payload layout: {0}")]
    PayloadLayout(String),
    #[error("missing tensor {0:?}")]
    MissingTensor(String),

    // --- encoder ----------------------------------------------------------
    #[error("invalid encoder config: {0}")]
    BadConfig(String),
    #[error("token {token} out of range for vocab size {vocab}")]
    TokenOutOfRange { token: u32, vocab: u32 },
    #[error("sequence has {got} tokens, expected {want}")]
    BadSeqLen { got: usize, want: usize },
    #[error("layer {0} does not belong to this encoder")]
    LayerNotInEncoder(String),
    #[error("layer {0} not captured in trace")]
    LayerNotCaptured(String),
    #[error("zero-norm embedding")]
    ZeroNormEmbedding,
    #[error("cannot parse {0:?} as a layer id")]
    BadLayerId(String),

    // --- calibration ------------------------------------------------------
    #[error("tuple file line {line}: {msg}")]
    TupleParse { line: usize, msg: String },
    #[error("duplicate tuple id {0}")]
    DuplicateTupleId(u64),
    #[error("concept {0:?} missing from the label list")]
    UnknownConcept(String),

    // --- scoring / selection ----------------------------------------------
    #[error("empty partition")]
    EmptyPartition,
    #[error("score-table layer mismatch: {0}")]
    LayerMismatch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("tau must be in (0, 1), got {0}")]
    BadTau(f32),
    #[error("sparsity must be in (0, 1), got {0}")]
    BadSparsity(f32),
    #[error("coordinate ({i}, {j}) out of range for layer {layer} with shape {rows}x{cols}")]
    CoordOutOfRange {
        layer: String,
        i: usize,
        j: usize,
        rows: usize,
        cols: usize,
    },
    #[error("mask entry for {name:?} must be 0.0 or 1.0, found {value}")]
    BadMaskValue { name: String, value: f32 },

    // --- baselines / metrics ----------------------------------------------
    #[error("batch must contain at least {want} samples, got {got}")]
    BatchTooSmall { got: usize, want: usize },
    #[error("empty calibration set")]
    EmptyCalibration,
    #[error("empty tuple set")]
    EmptyTupleSet,
    #[error("empty outcome list")]
    EmptyOutcomes,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("zero-shot evaluation needs at least one class")]
    NoClasses,

    // --- synthetic worlds --------------------------------------------------
    #[error("invalid world config: {0}")]
    BadWorldConfig(String),
    #[error("plant density {density} yields zero planted entries for layer {layer}")]
    EmptyPlant { layer: String, density: f64 },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
