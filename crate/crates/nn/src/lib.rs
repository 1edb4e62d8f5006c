//! A small reverse-mode autodiff engine for planar and volumetric
//! convolutional networks.
//!
//! Everything runs single-threaded on the CPU in a fixed order, so a
//! training run is bit-reproducible for a given seed.

mod checkpoint;
mod graph;
pub mod layers;
mod ops;
mod optim;
mod tensor;

pub use checkpoint::{restore_into, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use graph::{BackwardCtx, Grads, Graph, Param, ParamId, ParamKind, ParamStore, Var};
pub use ops::{linear_taps, resize_spatial, ConvGeom};
pub use optim::{Adam, AdamConfig};
pub use tensor::Tensor;

pub use rand_chacha::ChaCha8Rng;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("bad checkpoint magic")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated checkpoint")]
    Truncated,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint does not match network: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Deterministic RNG from a 64-bit seed.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}
