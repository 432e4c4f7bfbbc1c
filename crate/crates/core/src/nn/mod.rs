//! Fixed-architecture 1D CNN: conv blocks, FC head, exact gradients, Adam.

mod adam;
mod arch;
mod network;
mod params;
mod real;
mod train;

pub use adam::{adam_step, AdamConfig, OptimizerState};
pub use arch::{ArchitectureSpec, ConvBlockSpec, Part, TensorSlot, KERNEL};
pub use network::{
    backward, conv_features, encode_fids, forward, forward_batch, head_forward_features, mse_loss,
    predict_raw, report, GradMode, Tape,
};
pub use params::{NetworkParams, PRELU_INIT};
pub use real::Real;
pub use train::{train_sve, LossPoint, TrainConfig, TrainOutcome};
