use std::path::PathBuf;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: {dim} mismatch (expected {expected}, found {found})")]
    Shape {
        op: &'static str,
        dim: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("tensor is not part of this graph")]
    NotInGraph,

    #[error("backward requires a scalar loss, got {0} elements")]
    NotScalar(usize),

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },

    #[error("{what}: expected {expected_w}x{expected_h}, found {found_w}x{found_h}")]
    Dimensions {
        what: &'static str,
        expected_w: usize,
        expected_h: usize,
        found_w: usize,
        found_h: usize,
    },

    #[error("size {size} is not divisible by {factor}")]
    Indivisible { size: usize, factor: usize },

    #[error("image has a degenerate intensity range (min == max == {0})")]
    DegenerateRange(f32),

    #[error("invalid value: {0}")]
    Invalid(String),

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("unsupported format magic {0:?}")]
    UnsupportedMagic(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("evaluation mask is empty")]
    EmptyMask,

    #[error("reference image has zero energy over the evaluation region")]
    ZeroReference,

    #[error("no pixels above the mask threshold")]
    EmptyFitMask,

    #[error("normal equations are rank deficient")]
    RankDeficient,

    #[error("phantom ellipses are not nested: {0}")]
    Nesting(String),

    #[error("no usable images in {0}")]
    EmptyCorpus(PathBuf),

    #[error("{path}: {source}")]
    Decode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
