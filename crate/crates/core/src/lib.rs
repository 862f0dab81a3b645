//! Hierarchical k-step latent (HKSL) representation learning on top of a
//! pixel-based soft actor-critic, with toy multi-timescale environments,
//! aggregate evaluation statistics and the specialization / communication
//! analyses.
//!
//! Everything runs on the CPU in 64-bit floats. Learnable computation goes
//! through [`tensor`], a small reverse-mode automatic differentiation tape.

pub mod analysis;
pub mod envs;
pub mod error;
pub mod evalstats;
pub mod hksl;
pub mod models;
pub mod par;
pub mod replay;
pub mod sac;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
