use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::montecarlo::Quantity;
use crate::baselines::{spectral_fit, FitConfig};
use crate::error::{Error, Result};
use crate::finetune::{finetune_cached, maps_from_cache, FeatureCache, FinetuneConfig, MetaboliteMaps, SpatialPrior};
use crate::nn::NetworkParams;
use crate::signal::{deterministic_signal_into, dft_spectrum, time_noise_sd, FidParams, MetabolitePrior};
use crate::space::Dims;
use crate::synth::DmiDataset;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorMode {
    /// Against the known ground truth of a simulation.
    True,
    /// From re-synthesized noisy copies of measured data.
    Estimated,
}

/// Per-voxel bias and SD maps, `[metabolite][voxel]`, `None` outside the
/// mask or where no trial gave a value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorMaps {
    pub dims: Dims,
    pub quantity: Quantity,
    pub bias: Vec<Vec<Option<f64>>>,
    pub sd: Vec<Vec<Option<f64>>>,
    pub trials: usize,
    pub mode: ErrorMode,
}

fn select(maps: &MetaboliteMaps, q: Quantity) -> &Vec<Vec<Option<f64>>> {
    match q {
        Quantity::Ratio => &maps.ratios,
        Quantity::Amplitude => &maps.amplitudes,
    }
}

/// Sample mean and SD per voxel over `repeats[trial][metabolite][voxel]`.
fn moments(repeats: &[&Vec<Vec<Option<f64>>>]) -> (Vec<Vec<Option<f64>>>, Vec<Vec<Option<f64>>>) {
    let mets = repeats[0].len();
    let n = repeats[0][0].len();
    let mut mean = vec![vec![None; n]; mets];
    let mut sd = vec![vec![None; n]; mets];
    for m in 0..mets {
        for v in 0..n {
            let xs: Vec<f64> = repeats.iter().filter_map(|r| r[m][v]).collect();
            if xs.len() < 2 {
                continue;
            }
            let k = xs.len() as f64;
            let mu = xs.iter().sum::<f64>() / k;
            let var = xs.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / (k - 1.0);
            mean[m][v] = Some(mu);
            sd[m][v] = Some(var.sqrt());
        }
    }
    (mean, sd)
}

fn check_shape(maps: &[Vec<Option<f64>>], mets: usize, n: usize) -> Result<()> {
    if maps.len() != mets || maps.iter().any(|m| m.len() != n) {
        return Err(Error::shape(format!("{mets} maps of {n} voxels"), maps.len()));
    }
    Ok(())
}

/// True-error maps from repeated estimates of a simulation with known
/// `truth`. Bias is `|mean - truth|`.
pub fn bias_sd_maps(
    dims: Dims,
    quantity: Quantity,
    repeats: &[Vec<Vec<Option<f64>>>],
    truth: &[Vec<Option<f64>>],
) -> Result<ErrorMaps> {
    if repeats.len() < 2 {
        return Err(Error::invalid("error maps need at least 2 repeats"));
    }
    let mets = truth.len();
    check_shape(truth, mets, dims.len())?;
    for r in repeats {
        check_shape(r, mets, dims.len())?;
    }
    let refs: Vec<&Vec<Vec<Option<f64>>>> = repeats.iter().collect();
    let (mean, sd) = moments(&refs);
    let bias = mean
        .iter()
        .zip(truth)
        .map(|(mm, tm)| {
            mm.iter()
                .zip(tm)
                .map(|(a, t)| Some((a.as_ref()? - t.as_ref()?).abs()))
                .collect()
        })
        .collect();
    Ok(ErrorMaps {
        dims,
        quantity,
        bias,
        sd,
        trials: repeats.len(),
        mode: ErrorMode::True,
    })
}

/// How frequency, damping and phase are set in re-synthesized FIDs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NuisanceMode {
    #[default]
    Zero,
    /// From a short spectral fit per voxel.
    QuickFit,
}

/// What the bias of the PRECISE estimate is measured against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BiasReference {
    /// SVE on the same noisy copies.
    #[default]
    PairedSve,
    /// SVE on the measured data.
    Sve,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ErrorEstimationConfig {
    pub trials: usize,
    pub quantity: Quantity,
    pub nuisance: NuisanceMode,
    pub reference: BiasReference,
    /// Time-domain noise SD; estimated from the data when absent.
    pub noise_sd: Option<f64>,
    pub seed: u64,
}

impl Default for ErrorEstimationConfig {
    fn default() -> Self {
        ErrorEstimationConfig {
            trials: 10,
            quantity: Quantity::Ratio,
            nuisance: NuisanceMode::Zero,
            reference: BiasReference::PairedSve,
            noise_sd: None,
            seed: 0,
        }
    }
}

/// Median per-voxel noise SD over the mask.
pub fn dataset_noise_sd(dataset: &DmiDataset) -> Result<f64> {
    let mut s: Vec<f64> = dataset
        .masked()
        .iter()
        .map(|&v| time_noise_sd(&dft_spectrum(&dataset.fids[v])))
        .filter(|s| s.is_finite())
        .collect();
    if s.is_empty() {
        return Err(Error::invalid("no in-mask voxels to estimate noise from"));
    }
    s.sort_by(f64::total_cmp);
    let n = s.len();
    Ok(if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) })
}

fn quick_fit_config() -> FitConfig {
    FitConfig {
        max_iterations: 30,
        ..FitConfig::default()
    }
}

/// Error maps for data without ground truth.
///
/// SVE amplitudes are re-synthesized into clean FIDs, noise at the data's
/// level is added `trials` times, and the pipeline is rerun on each copy.
pub fn estimate_invivo_errors(
    dataset: &DmiDataset,
    priors: &[MetabolitePrior],
    cnn1: &NetworkParams<f32>,
    prior: &SpatialPrior,
    finetune: &FinetuneConfig,
    config: &ErrorEstimationConfig,
) -> Result<ErrorMaps> {
    if config.trials < 2 {
        return Err(Error::invalid("error estimation needs at least 2 trials"));
    }
    finetune.validate()?;
    if cnn1.arch().outputs != priors.len() {
        return Err(Error::shape(priors.len(), cnn1.arch().outputs));
    }
    let sigma = match config.noise_sd {
        Some(s) if s >= 0.0 && s.is_finite() => s,
        Some(s) => return Err(Error::invalid(format!("noise SD must be >= 0, got {s}"))),
        None => dataset_noise_sd(dataset)?,
    };
    let cache = FeatureCache::new(dataset, cnn1)?;
    let sve = maps_from_cache(&cache, cnn1)?;

    let mut clean = dataset.fids.clone();
    for &v in &cache.voxels {
        let amplitudes: Vec<f64> = sve.amplitudes.iter().map(|m| m[v].unwrap_or(0.0)).collect();
        let mut params = FidParams::ideal(amplitudes);
        if config.nuisance == NuisanceMode::QuickFit {
            if let Ok(fit) = spectral_fit(&dataset.fids[v], priors, &quick_fit_config()) {
                let p = FidParams {
                    delta_f: fit.delta_f,
                    delta_t: fit.delta_t,
                    phase: fit.phase,
                    ..params.clone()
                };
                if p.validate(priors).is_ok() {
                    params = p;
                }
            }
        }
        deterministic_signal_into(&params, priors, &dataset.grid, &mut clean[v].samples);
    }

    let mut precise_runs = Vec::with_capacity(config.trials);
    let mut sve_runs = Vec::with_capacity(config.trials);
    let mut copy = dataset.clone();
    for t in 0..config.trials {
        for &v in &cache.voxels {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(((t as u64) << 32) | v as u64);
            copy.fids[v] = clean[v].clone();
            copy.fids[v].add_noise(sigma, &mut rng);
        }
        let c = FeatureCache::new(&copy, cnn1)?;
        let s = maps_from_cache(&c, cnn1)?;
        let p = if finetune.lambda == 0.0 {
            s.clone()
        } else {
            let tuned = finetune_cached(&c, cnn1, prior, finetune)?;
            maps_from_cache(&c, &tuned.params)?
        };
        precise_runs.push(select(&p, config.quantity).clone());
        sve_runs.push(select(&s, config.quantity).clone());
    }

    let refs: Vec<&Vec<Vec<Option<f64>>>> = precise_runs.iter().collect();
    let (mean, sd) = moments(&refs);
    let reference = match config.reference {
        BiasReference::PairedSve => {
            let refs: Vec<&Vec<Vec<Option<f64>>>> = sve_runs.iter().collect();
            moments(&refs).0
        }
        BiasReference::Sve => select(&sve, config.quantity).clone(),
    };
    let bias = mean
        .iter()
        .zip(&reference)
        .map(|(mm, rm)| {
            mm.iter()
                .zip(rm)
                .map(|(a, r)| Some((a.as_ref()? - r.as_ref()?).abs()))
                .collect()
        })
        .collect();
    Ok(ErrorMaps {
        dims: dataset.dims,
        quantity: config.quantity,
        bias,
        sd,
        trials: config.trials,
        mode: ErrorMode::Estimated,
    })
}
