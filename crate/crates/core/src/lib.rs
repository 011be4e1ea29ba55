//! Feature-level bi-stage diffusion for visual-to-textual alignment.
//!
//! The crate maps visual feature vectors toward the distribution of textual
//! feature vectors with a conditional denoising chain, then classifies the
//! aligned features with a linear head. It ships the full desk-scale pipeline:
//!
//! - [`schedule`]: beta schedule, cumulative products, forward noising
//! - [`denoiser`]: cross-attention reconstruction network with hand-written
//!   backward passes for gradient checking
//! - [`losses`]: structural, reconstruction and label losses plus the staged
//!   dispatch that mixes them by diffusion step
//! - [`sampler`]: reverse chain from pure noise conditioned on visual features
//! - [`data`]: synthetic paired-feature generator and the binary dataset format
//! - [`trainer`]: seeded training loop, Adam with decoupled weight decay,
//!   per-epoch checkpoints with bit-exact resume
//! - [`evalkit`]: ranking metrics, evaluation reports, one-step baseline
//! - [`plot`]: raster renderings of a report (confusion, trajectory, scatter)
//!
//! All numeric code is generic over [`scalar::Scalar`] (f32 or f64).

pub mod checkpoint;
pub mod data;
pub mod denoiser;
pub mod error;
pub mod evalkit;
pub mod losses;
pub mod plot;
pub mod sampler;
pub mod scalar;
pub mod schedule;
pub mod trainer;

pub use error::{Result, SedaError};
pub use scalar::Scalar;

/// Single-precision aliases used by the command line tools.
pub type NoiseSchedule32 = schedule::NoiseSchedule<f32>;
pub type SedaModel32 = denoiser::SedaModel<f32>;
pub type Trainer32 = trainer::Trainer<f32>;

/// Double-precision aliases, the instantiation used for gradient checking.
pub type NoiseSchedule64 = schedule::NoiseSchedule<f64>;
pub type SedaModel64 = denoiser::SedaModel<f64>;
pub type Trainer64 = trainer::Trainer<f64>;
