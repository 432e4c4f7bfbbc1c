//! Synthetic data: training pairs for the estimator and the simulation
//! phantom with its DMI dataset.

mod dataset;
mod phantom;
mod training;

pub use dataset::{DmiDataset, MriVolume};
pub use phantom::{
    build_phantom, noise_sd_for_snr, noisy_realization, phantom_noise_sd, phantom_to_dmi, B0Config, B1Config, CompartmentProfile,
    Phantom, PhantomConfig, TumorPlacement, TumorScenario,
};
pub use training::{sample_training_pair, sample_training_params, TrainingSampleSpec};
