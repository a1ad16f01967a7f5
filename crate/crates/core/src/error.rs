use thiserror::Error;

use crate::corpus::MalformedRecord;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("invalid point ({lat}, {lon})")]
    InvalidPoint { lat: f64, lon: f64 },
    #[error("bounding box min must be strictly below max on both axes")]
    InvalidBbox,
    #[error("pyramid height {0} out of range 1..=15")]
    InvalidHeight(u8),
    #[error("level {level} outside 1..={height}")]
    InvalidLevel { level: u8, height: u8 },
    #[error("point ({lat}, {lon}) lies outside the pyramid bounding box")]
    PointOutsideBbox { lat: f64, lon: f64 },
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{} of {total} lines malformed (first: {})", malformed.len(), malformed.first().map(|m| m.to_string()).unwrap_or_default())]
    TooManyMalformed { malformed: Vec<MalformedRecord>, total: usize },
    #[error("no activities and no explicit home for user")]
    NoData,
    #[error("line {line}: {reason}")]
    BadHomeRecord { line: usize, reason: String },
    #[error("corpus file has wrong magic; expected {expected}")]
    VersionMismatch { expected: &'static str },
    #[error("corrupt corpus bundle: {0}")]
    Corrupt(String),
    #[error("split fraction {0} must lie strictly between 0 and 1")]
    BadFraction(f64),
    #[error("corpus contains no activities")]
    Empty,
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model file has wrong magic; expected {expected}")]
    VersionMismatch { expected: &'static str },
    #[error("corrupt model: {0}")]
    CorruptModel(String),
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training split is empty")]
    EmptyCorpus,
    #[error("objective became non-finite ({0})")]
    NonFiniteObjective(f64),
    #[error("model height {model} does not match corpus pyramid height {corpus}")]
    HeightMismatch { model: u8, corpus: u8 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Error)]
pub enum RecommendError {
    #[error("corpus dictionaries ({corpus}) do not match the model ({model})")]
    DictMismatch { model: String, corpus: String },
    #[error("zoom level {zoom} outside 1..={height}")]
    BadZoom { zoom: u8, height: u8 },
    #[error("k and radius must be positive")]
    BadQuery,
    #[error(transparent)]
    Geo(#[from] GeoError),
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no test cases to evaluate")]
    EmptyTestSet,
    #[error(transparent)]
    Recommend(#[from] RecommendError),
}

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("rejection sampling exceeded {cap} draws for topic {topic} in cell {cell}")]
    RejectionCapExceeded { cap: usize, topic: usize, cell: String },
    #[error("invalid synth spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Geo(#[from] GeoError),
}
