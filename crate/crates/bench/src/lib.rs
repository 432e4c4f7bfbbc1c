//! Shared fixtures for the benchmarks.

use precise_dmi::nn::NetworkParams;
use precise_dmi::signal::{default_priors, synth_realistic_fid};
use precise_dmi::synth::sample_training_params;
use precise_dmi::{ArchitectureSpec, Fid, MetabolitePrior, SpectralGrid, TrainingSampleSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub struct Fixture {
    pub priors: Vec<MetabolitePrior>,
    pub grid: SpectralGrid,
    pub params: NetworkParams<f32>,
    pub fids: Vec<Fid>,
}

/// Randomly initialized full-size network and `n` noisy training-style FIDs.
pub fn fixture(n: usize) -> Fixture {
    let priors = default_priors();
    let grid = SpectralGrid::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let params = NetworkParams::init(ArchitectureSpec::default(), &mut rng).expect("default architecture");
    let spec = TrainingSampleSpec::default();
    let fids = (0..n)
        .map(|_| {
            let p = sample_training_params(&spec, priors.len(), &mut rng);
            synth_realistic_fid(&p, &priors, &grid, &mut rng).expect("valid draw")
        })
        .collect();
    Fixture { priors, grid, params, fids }
}
