//! Deuterium metabolic imaging: CNN-based single-voxel amplitude estimation,
//! MRI-guided edge-preserving fine-tuning, comparison baselines and
//! precision/accuracy metrics.

pub mod baselines;
pub mod error;
pub mod finetune;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod signal;
pub mod space;
pub mod synth;

pub use error::{Error, Result};
pub use nn::{ArchitectureSpec, NetworkParams, TrainConfig};
pub use signal::{Fid, FidParams, MetabolitePrior, SpectralGrid, Spectrum};
pub use space::Dims;
pub use synth::{DmiDataset, TrainingSampleSpec};
