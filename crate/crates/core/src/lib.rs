//! Saliency-guided RWKV image classifier with caption fusion.
//!
//! Everything runs in `f64` on the CPU. Parameters are stored at `f32`
//! precision so that checkpoints reproduce a run bit for bit.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod featuremap;
pub mod fusion;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod params;
pub mod partition;
pub mod rwkv;
pub mod selftest;
pub mod spectral;
pub mod tensor;
pub mod train;
pub mod wkv;

pub use error::{CoreError, Result};
pub use tensor::Tensor;
