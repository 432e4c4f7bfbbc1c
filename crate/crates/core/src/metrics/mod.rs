//! Precision and accuracy: Cramer-Rao bounds, Monte-Carlo SNR sweeps and
//! per-voxel bias/SD maps.

mod crlb;
mod errors;
mod montecarlo;

pub use crlb::{
    crlb_amplitude, crlb_amplitude_continuous, crlb_comparison, crlb_r_factor,
    fisher_crlb_full, fisher_crlb_numeric, single_line_crlb, CrlbRow,
};
pub use errors::{
    bias_sd_maps, dataset_noise_sd, estimate_invivo_errors, BiasReference, ErrorEstimationConfig, ErrorMaps, ErrorMode,
    NuisanceMode,
};
pub use montecarlo::{
    image_level_stats, monte_carlo, snr_levels, AmplitudeEstimator, CnnEstimator, FitEstimator, FourierEstimator,
    LevelStats, McConfig, McReport, Quantity,
};
