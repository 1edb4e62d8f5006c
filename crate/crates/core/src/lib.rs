//! Synthesis of OCT fingerprint volumes from 2D prints.
//!
//! The pipeline runs in three learned stages: a binary impression is
//! restyled into a depth-averaged OCT image ([`style`]), lifted into a
//! structural volume ([`expansion`]) and then given OCT texture
//! ([`refiner`]). Procedural phantoms ([`phantom`]) stand in for real scans
//! and supply paired training data; [`metrics`] holds SSIM, Fréchet
//! distances and the ROC/EER harness.

pub mod expansion;
pub mod masterprint;
pub mod metrics;
pub mod phantom;
pub mod pipeline;
pub mod refiner;
pub mod style;
pub mod tensor_io;
pub mod training;

mod util;

pub use tensor_io::{BinaryImage2D, Category, DatasetManifest, Image2D, ManifestEntry, Volume3D};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("unsupported dtype code {0} (only 1 = float32 is supported)")]
    Dtype(u8),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dims { expected: String, found: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid value: {0}")]
    Invalid(String),
    #[error("blank image")]
    BlankImage,
    #[error("singular TPS system: {0}")]
    Singular(String),
    #[error("missing prerequisite: {0}")]
    Missing(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Nn(#[from] p2v_nn::NnError),
    #[error("image encoding: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }
}
