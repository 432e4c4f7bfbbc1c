use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{
    deterministic_signal_into, dft_spectrum, synth_ideal_fid, water_peak_height, Fid, FidParams,
    MetabolitePrior, SpectralGrid,
};

/// Sampling ranges for synthetic training pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingSampleSpec {
    /// Amplitudes are drawn from U[0, a_max].
    pub a_max: f64,
    /// Additive T2* change, seconds.
    pub delta_t_range: [f64; 2],
    /// Frequency shift, Hz.
    pub delta_f_range: [f64; 2],
    /// Noisy samples draw sigma from U(0, sigma_max].
    pub sigma_max: f64,
    /// Probability that a sample is noiseless.
    pub noiseless_fraction: f64,
}

impl Default for TrainingSampleSpec {
    fn default() -> Self {
        Self::calibrated(&crate::signal::default_priors(), &SpectralGrid::default(), 4.0, 1.0)
    }
}

impl TrainingSampleSpec {
    /// Default ranges with `sigma_max` set so a water line of amplitude
    /// `nominal_water` reaches a water SNR of `min_water_snr` at the noisiest
    /// draw. `a_max` is twice the nominal water amplitude.
    pub fn calibrated(
        priors: &[MetabolitePrior],
        grid: &SpectralGrid,
        min_water_snr: f64,
        nominal_water: f64,
    ) -> Self {
        let mut amps = vec![0.0; priors.len()];
        amps[0] = nominal_water;
        let peak = synth_ideal_fid(&FidParams::ideal(amps), priors, grid)
            .map(|f| water_peak_height(&dft_spectrum(&f)))
            .unwrap_or(0.0);
        TrainingSampleSpec {
            a_max: 2.0 * nominal_water,
            delta_t_range: [-0.008, 0.0],
            delta_f_range: [-30.0, 30.0],
            sigma_max: peak / (min_water_snr * (grid.n_points as f64).sqrt()),
            noiseless_fraction: 0.2,
        }
    }

    pub fn validate(&self, priors: &[MetabolitePrior]) -> Result<()> {
        if !(self.a_max > 0.0) {
            return Err(Error::invalid("a_max must be positive"));
        }
        if !(self.delta_t_range[0] <= self.delta_t_range[1])
            || !(self.delta_f_range[0] <= self.delta_f_range[1])
        {
            return Err(Error::invalid("sampling ranges must be ordered"));
        }
        if !(self.sigma_max >= 0.0) || !(0.0..=1.0).contains(&self.noiseless_fraction) {
            return Err(Error::invalid(
                "sigma_max must be >= 0 and noiseless_fraction in [0, 1]",
            ));
        }
        for p in priors {
            if !(p.t2star + self.delta_t_range[0] > 0.0) {
                return Err(Error::NonPhysicalDecay {
                    t2star: p.t2star,
                    delta_t: self.delta_t_range[0],
                });
            }
        }
        Ok(())
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Draws the parameters of one training sample: amplitudes, broadening,
/// shift, phase and noise level, in that order from `rng`.
pub fn sample_training_params<R: Rng + ?Sized>(
    spec: &TrainingSampleSpec,
    n_metabolites: usize,
    rng: &mut R,
) -> FidParams {
    let amplitudes: Vec<f64> = (0..n_metabolites).map(|_| uniform(rng, 0.0, spec.a_max)).collect();
    let delta_t = uniform(rng, spec.delta_t_range[0], spec.delta_t_range[1]);
    let delta_f = uniform(rng, spec.delta_f_range[0], spec.delta_f_range[1]);
    let phase = 2.0 * PI * rng.random::<f64>();
    let noiseless = rng.random::<f64>() < spec.noiseless_fraction;
    // 1 - u lies in (0, 1], so sigma is never exactly zero for noisy draws
    let noise_sd = if noiseless {
        0.0
    } else {
        spec.sigma_max * (1.0 - rng.random::<f64>())
    };
    FidParams {
        amplitudes,
        delta_f,
        delta_t,
        phase,
        noise_sd,
    }
}

/// Draws one `(noisy FID, amplitude vector)` pair. `spec` must have passed
/// [`TrainingSampleSpec::validate`] for `priors`.
pub fn sample_training_pair<R: Rng + ?Sized>(
    spec: &TrainingSampleSpec,
    priors: &[MetabolitePrior],
    grid: &SpectralGrid,
    rng: &mut R,
) -> (Fid, Vec<f64>) {
    let params = sample_training_params(spec, priors.len(), rng);
    let mut fid = Fid::zeros(*grid);
    deterministic_signal_into(&params, priors, grid, &mut fid.samples);
    fid.add_noise(params.noise_sd, rng);
    (fid, params.amplitudes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::default_priors;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_spec_is_valid() {
        let spec = TrainingSampleSpec::default();
        spec.validate(&default_priors()).unwrap();
        assert_eq!(spec.a_max, 2.0);
        assert!(spec.sigma_max > 0.3 && spec.sigma_max < 0.4, "{}", spec.sigma_max);
    }

    #[test]
    fn rejects_bad_specs() {
        let priors = default_priors();
        let mut s = TrainingSampleSpec::default();
        s.delta_t_range = [-0.02, 0.0];
        assert!(s.validate(&priors).is_err());
        let mut s = TrainingSampleSpec::default();
        s.delta_f_range = [5.0, -5.0];
        assert!(s.validate(&priors).is_err());
        let mut s = TrainingSampleSpec::default();
        s.a_max = 0.0;
        assert!(s.validate(&priors).is_err());
    }

    #[test]
    fn degenerate_ranges_give_deterministic_fids() {
        let priors = default_priors();
        let grid = SpectralGrid::default();
        let spec = TrainingSampleSpec {
            a_max: 1.0,
            delta_t_range: [-0.001, -0.001],
            delta_f_range: [4.0, 4.0],
            sigma_max: 0.0,
            noiseless_fraction: 0.2,
        };
        for seed in 0..20 {
            let (fid, amps) =
                sample_training_pair(&spec, &priors, &grid, &mut ChaCha8Rng::seed_from_u64(seed));
            let params = sample_training_params(&spec, 4, &mut ChaCha8Rng::seed_from_u64(seed));
            assert_eq!((params.delta_f, params.delta_t, params.noise_sd), (4.0, -0.001, 0.0));
            assert_eq!(amps, params.amplitudes);
            let mut clean = Fid::zeros(grid);
            deterministic_signal_into(&params, &priors, &grid, &mut clean.samples);
            assert_eq!(fid, clean);
            assert!(amps.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn same_seed_same_stream() {
        let priors = default_priors();
        let grid = SpectralGrid::default();
        let spec = TrainingSampleSpec::default();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..4)
                .map(|_| sample_training_pair(&spec, &priors, &grid, &mut rng))
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(11), draw(11));
    }
}
