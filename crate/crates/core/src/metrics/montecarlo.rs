use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{fourier_amplitudes, spectral_fit, FitConfig, IntegrationWindows};
use crate::error::{Error, Result};
use crate::nn::{predict_raw, report, NetworkParams};
use crate::signal::{deterministic_signal_into, Fid, FidParams, MetabolitePrior, SpectralGrid};
use crate::finetune::{finetune_cached, maps_from_cache, FeatureCache, FinetuneConfig, SpatialPrior};
use crate::synth::{noise_sd_for_snr, noisy_realization, phantom_noise_sd, Phantom};

/// What a percentage error is computed on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quantity {
    /// Metabolite amplitude over water amplitude.
    #[default]
    Ratio,
    Amplitude,
}

/// Something that turns FIDs into amplitude vectors.
pub trait AmplitudeEstimator {
    fn name(&self) -> &str;

    /// One result per FID; a failed voxel yields `Err` without aborting the
    /// others.
    fn estimate(&mut self, fids: &[Fid]) -> Vec<Result<Vec<f64>>>;
}

pub struct FourierEstimator<'a> {
    pub windows: IntegrationWindows,
    pub priors: &'a [MetabolitePrior],
}

impl AmplitudeEstimator for FourierEstimator<'_> {
    fn name(&self) -> &str {
        "fourier"
    }

    fn estimate(&mut self, fids: &[Fid]) -> Vec<Result<Vec<f64>>> {
        fids.iter()
            .map(|f| fourier_amplitudes(f, &self.windows, self.priors))
            .collect()
    }
}

pub struct CnnEstimator<'a> {
    pub label: String,
    pub params: &'a NetworkParams<f32>,
}

impl AmplitudeEstimator for CnnEstimator<'_> {
    fn name(&self) -> &str {
        &self.label
    }

    fn estimate(&mut self, fids: &[Fid]) -> Vec<Result<Vec<f64>>> {
        let refs: Vec<&Fid> = fids.iter().collect();
        match predict_raw(self.params, &refs) {
            Ok(raw) => raw.iter().map(|r| Ok(report(r))).collect(),
            Err(e) => {
                let msg = e.to_string();
                fids.iter().map(|_| Err(Error::Numerical(msg.clone()))).collect()
            }
        }
    }
}

pub struct FitEstimator<'a> {
    pub priors: &'a [MetabolitePrior],
    pub config: FitConfig,
}

impl AmplitudeEstimator for FitEstimator<'_> {
    fn name(&self) -> &str {
        "fit"
    }

    fn estimate(&mut self, fids: &[Fid]) -> Vec<Result<Vec<f64>>> {
        fids.iter()
            .map(|f| spectral_fit(f, self.priors, &self.config).map(|r| r.amplitudes))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McConfig {
    pub trials: usize,
    /// Target water SNR levels, ascending.
    pub levels: Vec<f64>,
    /// Index of the investigated metabolite.
    pub metabolite: usize,
    pub seed: u64,
    /// Append a noise-free level after the noisy ones.
    pub include_noiseless: bool,
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig {
            trials: 200,
            levels: snr_levels(14, 5.0, 35.0),
            metabolite: 2,
            seed: 0,
            include_noiseless: false,
        }
    }
}

impl McConfig {
    pub fn validate(&self, metabolites: usize) -> Result<()> {
        if self.trials < 2 {
            return Err(Error::invalid("Monte Carlo needs at least 2 trials"));
        }
        if self.levels.windows(2).any(|w| !(w[0] < w[1])) || self.levels.iter().any(|l| !(*l > 0.0)) {
            return Err(Error::invalid("SNR levels must be positive and strictly ascending"));
        }
        if self.metabolite == 0 || self.metabolite >= metabolites {
            return Err(Error::invalid("investigated metabolite must be a non-water line"));
        }
        Ok(())
    }
}

/// `n` evenly spaced levels from `lo` to `hi` inclusive.
pub fn snr_levels(n: usize, lo: f64, hi: f64) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

/// Error statistics of one estimator at one level. Percentages are
/// `(estimate - truth) / truth * 100`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelStats {
    pub estimator: String,
    pub ratio_mean_pct: f64,
    pub ratio_sd_pct: f64,
    pub amplitude_mean_pct: f64,
    pub amplitude_sd_pct: f64,
    /// SD of the raw amplitude estimate, in amplitude units.
    pub amplitude_sd: f64,
    pub used: usize,
    pub failures: usize,
}

impl LevelStats {
    pub fn sd_pct(&self, q: Quantity) -> f64 {
        match q {
            Quantity::Ratio => self.ratio_sd_pct,
            Quantity::Amplitude => self.amplitude_sd_pct,
        }
    }

    pub fn mean_pct(&self, q: Quantity) -> f64 {
        match q {
            Quantity::Ratio => self.ratio_mean_pct,
            Quantity::Amplitude => self.amplitude_mean_pct,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McLevel {
    /// Target SNR; infinite for the noise-free level.
    pub snr: f64,
    pub sigma: f64,
    pub stats: Vec<LevelStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub metabolite: usize,
    pub trials: usize,
    pub levels: Vec<McLevel>,
}

impl McReport {
    pub fn stats(&self, level: usize, estimator: &str) -> Option<&LevelStats> {
        self.levels[level].stats.iter().find(|s| s.estimator == estimator)
    }
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Noise realization `trial` of `clean` at `sigma`, from its own stream.
pub(crate) fn trial_fid(clean: &Fid, sigma: f64, seed: u64, level: usize, trial: usize) -> Fid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((level as u64) << 32) | trial as u64);
    let mut f = clean.clone();
    f.add_noise(sigma, &mut rng);
    f
}

/// Repeated noise realizations of one voxel at each SNR level, every
/// estimator seeing the same realizations.
pub fn monte_carlo(
    truth: &FidParams,
    priors: &[MetabolitePrior],
    grid: &SpectralGrid,
    estimators: &mut [&mut dyn AmplitudeEstimator],
    config: &McConfig,
) -> Result<McReport> {
    config.validate(priors.len())?;
    truth.validate(priors)?;
    let m = config.metabolite;
    let a_true = truth.amplitudes[m];
    let ratio_true = a_true / truth.amplitudes[0];
    if !(a_true > 0.0) || !ratio_true.is_finite() {
        return Err(Error::invalid("investigated line and water must be present"));
    }
    let mut clean = Fid::zeros(*grid);
    deterministic_signal_into(truth, priors, grid, &mut clean.samples);

    let mut targets: Vec<(f64, f64)> = config
        .levels
        .iter()
        .map(|&snr| Ok((snr, noise_sd_for_snr(&[&clean], snr)?)))
        .collect::<Result<_>>()?;
    if config.include_noiseless {
        targets.push((f64::INFINITY, 0.0));
    }

    let mut levels = Vec::with_capacity(targets.len());
    for (li, &(snr, sigma)) in targets.iter().enumerate() {
        let fids: Vec<Fid> = (0..config.trials)
            .map(|t| trial_fid(&clean, sigma, config.seed, li, t))
            .collect();
        let mut stats = Vec::with_capacity(estimators.len());
        for est in estimators.iter_mut() {
            let mut ratio = Vec::new();
            let mut amp = Vec::new();
            let mut failures = 0;
            for r in est.estimate(&fids) {
                match r {
                    Ok(a) if a.len() == priors.len() && a.iter().all(|v| v.is_finite()) && a[0] > 0.0 => {
                        ratio.push((a[m] / a[0] - ratio_true) / ratio_true * 100.0);
                        amp.push(a[m]);
                    }
                    _ => failures += 1,
                }
            }
            let (am, asd) = mean_sd(&amp);
            let (rm, rsd) = mean_sd(&ratio);
            stats.push(LevelStats {
                estimator: est.name().to_string(),
                ratio_mean_pct: rm,
                ratio_sd_pct: rsd,
                amplitude_mean_pct: (am - a_true) / a_true * 100.0,
                amplitude_sd_pct: asd / a_true * 100.0,
                amplitude_sd: asd,
                used: amp.len(),
                failures,
            });
        }
        levels.push(McLevel { snr, sigma, stats });
    }
    Ok(McReport {
        metabolite: m,
        trials: config.trials,
        levels,
    })
}

/// Mean and SD of pooled percentage errors for one estimator label.
fn pooled_stats(label: &str, ratio: &[f64], amp: &[f64], amp_abs: &[f64], failures: usize) -> LevelStats {
    let (rm, rsd) = mean_sd(ratio);
    let (am, asd) = mean_sd(amp);
    let (_, abs_sd) = mean_sd(amp_abs);
    LevelStats {
        estimator: label.to_string(),
        ratio_mean_pct: rm,
        ratio_sd_pct: rsd,
        amplitude_mean_pct: am,
        amplitude_sd_pct: asd,
        amplitude_sd: abs_sd,
        used: ratio.len(),
        failures,
    }
}

/// Whole-image estimator statistics at each SNR level.
///
/// For every level the phantom is realized `realizations` times at the noise
/// SD that gives compartment 3 the target water SNR; the network is
/// fine-tuned on each realization and the percentage errors of `voxels` are
/// pooled. Returns `(sigma, stats)` per level. `finetune.lambda = 0` gives
/// the plain SVE on the same realizations.
#[allow(clippy::too_many_arguments)]
pub fn image_level_stats(
    label: &str,
    phantom: &Phantom,
    clean: &[Fid],
    cnn1: &NetworkParams<f32>,
    prior: &SpatialPrior,
    finetune: &FinetuneConfig,
    levels: &[f64],
    realizations: usize,
    voxels: &[usize],
    metabolite: usize,
    seed: u64,
) -> Result<Vec<(f64, LevelStats)>> {
    finetune.validate()?;
    if realizations == 0 || voxels.is_empty() {
        return Err(Error::invalid("need at least one realization and one voxel"));
    }
    let m = metabolite;
    if m == 0 || m >= cnn1.arch().outputs {
        return Err(Error::invalid("investigated metabolite must be a non-water line"));
    }
    let truth: Vec<(f64, f64)> = voxels
        .iter()
        .map(|&v| {
            let a = &phantom.voxel_params(v).amplitudes;
            (a[m], a[m] / a[0])
        })
        .collect();
    if truth.iter().any(|&(a, r)| !(a > 0.0) || !r.is_finite()) {
        return Err(Error::invalid("investigated line and water must be present in every voxel"));
    }
    let mut out = Vec::with_capacity(levels.len());
    for (li, &snr) in levels.iter().enumerate() {
        let sigma = phantom_noise_sd(phantom, clean, snr)?;
        let (mut ratio, mut amp, mut amp_abs) = (Vec::new(), Vec::new(), Vec::new());
        let mut failures = 0;
        for r in 0..realizations {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(((li as u64) << 32) | r as u64);
            let ds = noisy_realization(phantom, clean, sigma, rand::Rng::random(&mut rng))?;
            let cache = FeatureCache::new(&ds, cnn1)?;
            let maps = if finetune.lambda == 0.0 {
                maps_from_cache(&cache, cnn1)?
            } else {
                let tuned = finetune_cached(&cache, cnn1, prior, finetune)?;
                maps_from_cache(&cache, &tuned.params)?
            };
            for (&v, &(a_true, r_true)) in voxels.iter().zip(&truth) {
                match (maps.ratios[m][v], maps.amplitudes[m][v]) {
                    (Some(q), Some(a)) if q.is_finite() && a.is_finite() => {
                        ratio.push((q - r_true) / r_true * 100.0);
                        amp.push((a - a_true) / a_true * 100.0);
                        amp_abs.push(a - a_true);
                    }
                    _ => failures += 1,
                }
            }
        }
        out.push((sigma, pooled_stats(label, &ratio, &amp, &amp_abs, failures)));
    }
    Ok(out)
}
