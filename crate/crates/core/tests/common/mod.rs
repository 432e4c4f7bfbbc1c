#![allow(dead_code)]

use precise_dmi::nn::{train_sve, ArchitectureSpec, ConvBlockSpec, NetworkParams, TrainConfig};
use precise_dmi::signal::{default_priors, SpectralGrid};
use precise_dmi::synth::TrainingSampleSpec;

/// A small, briefly trained estimator. Good enough for structural
/// properties, not for precision.
pub fn small_net() -> NetworkParams<f32> {
    let arch = ArchitectureSpec {
        input_len: 512,
        input_channels: 2,
        blocks: vec![
            ConvBlockSpec { channels: 4, pool: 4 },
            ConvBlockSpec { channels: 8, pool: 4 },
        ],
        hidden: 32,
        outputs: 4,
    };
    let cfg = TrainConfig {
        batch_size: 32,
        iterations: 300,
        ..TrainConfig::default()
    };
    train_sve(
        &TrainingSampleSpec::default(),
        &default_priors(),
        &SpectralGrid::default(),
        &arch,
        &cfg,
        None,
    )
    .unwrap()
    .params
}
