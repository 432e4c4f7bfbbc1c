//! Parametric FID synthesis, spectral transforms and unit conversions.
//!
//! Frequencies are offsets from the water resonance (4.7 ppm), so water sits
//! at 0 Hz and a global B0 shift appears directly as `delta_f`.
//!
//! DFT convention, shared by every module in the crate:
//!
//! ```text
//! X[k] = sum_n x[n] exp(-2 pi i k n / N)        (no normalisation)
//! x[n] = (1/N) sum_k X[k] exp(+2 pi i k n / N)
//! ```
//!
//! A signal `exp(+2 pi i f t)` therefore peaks at `+f`. [`Spectrum`] stores
//! bins in ascending frequency order, bin `j` sitting at
//! `(j - N/2) * spectral_width / N` Hz. Complex white noise with SD `sigma`
//! on each of the real and imaginary parts in time has per-component SD
//! `sigma * sqrt(N)` in every bin.

use std::cell::RefCell;
use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Chemical shift of water, the on-resonance reference.
pub const WATER_SHIFT_PPM: f64 = 4.7;

/// Natural-abundance 2H water concentration used to turn ratios into mM.
pub const WATER_CONCENTRATION_MM: f64 = 10.0;

/// Half-width of the window searched for the water peak when measuring SNR.
pub const WATER_SNR_WINDOW_PPM: f64 = 0.5;

const DEFAULT_PRIORS: &str = include_str!("../config/priors.json");

/// Fixed resonance properties of one compound.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetabolitePrior {
    pub name: String,
    /// ppm
    pub chemical_shift: f64,
    /// T2* in seconds
    pub t2star: f64,
}

impl MetabolitePrior {
    pub fn new(name: impl Into<String>, chemical_shift: f64, t2star: f64) -> Result<Self> {
        let prior = MetabolitePrior {
            name: name.into(),
            chemical_shift,
            t2star,
        };
        prior.validate()?;
        Ok(prior)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t2star > 0.0) || !self.t2star.is_finite() {
            return Err(Error::invalid(format!(
                "{}: T2* must be positive, got {}",
                self.name, self.t2star
            )));
        }
        if !self.chemical_shift.is_finite() {
            return Err(Error::invalid(format!("{}: chemical shift", self.name)));
        }
        Ok(())
    }

    /// Offset from water in Hz.
    pub fn offset_hz(&self, grid: &SpectralGrid) -> f64 {
        grid.ppm_to_hz(self.chemical_shift)
    }
}

#[derive(Deserialize)]
struct PriorFile {
    metabolites: Vec<MetabolitePrior>,
}

/// Water, Glc, Glx and Lac with the shipped (editable) T2* defaults.
pub fn default_priors() -> Vec<MetabolitePrior> {
    load_priors(DEFAULT_PRIORS).expect("bundled prior file is valid")
}

/// Parses a prior file of the same shape as `config/priors.json`.
pub fn load_priors(json: &str) -> Result<Vec<MetabolitePrior>> {
    let file: PriorFile = serde_json::from_str(json)?;
    if file.metabolites.is_empty() {
        return Err(Error::invalid("prior file lists no metabolites"));
    }
    for p in &file.metabolites {
        p.validate()?;
    }
    Ok(file.metabolites)
}

/// Sampling geometry of an FID.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralGrid {
    pub n_points: usize,
    /// Hz
    pub spectral_width: f64,
    /// MHz
    pub reference_frequency: f64,
}

impl Default for SpectralGrid {
    fn default() -> Self {
        SpectralGrid {
            n_points: 512,
            spectral_width: 2500.0,
            reference_frequency: 76.7,
        }
    }
}

impl SpectralGrid {
    pub fn new(n_points: usize, spectral_width: f64, reference_frequency: f64) -> Result<Self> {
        let grid = SpectralGrid {
            n_points,
            spectral_width,
            reference_frequency,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_points < 2 {
            return Err(Error::invalid("spectral grid needs at least 2 points"));
        }
        if !(self.spectral_width > 0.0) || !(self.reference_frequency > 0.0) {
            return Err(Error::invalid(
                "spectral width and reference frequency must be positive",
            ));
        }
        Ok(())
    }

    pub fn dwell_time(&self) -> f64 {
        1.0 / self.spectral_width
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dwell_time()
    }

    /// Hz per spectral bin.
    pub fn frequency_resolution(&self) -> f64 {
        self.spectral_width / self.n_points as f64
    }

    /// Frequency of bin `j` of a [`Spectrum`].
    pub fn bin_frequency(&self, j: usize) -> f64 {
        (j as f64 - (self.n_points / 2) as f64) * self.frequency_resolution()
    }

    /// Spectrum bin closest to `hz`, clamped to the axis.
    pub fn nearest_bin(&self, hz: f64) -> usize {
        let j = (hz / self.frequency_resolution()).round() + (self.n_points / 2) as f64;
        j.clamp(0.0, (self.n_points - 1) as f64) as usize
    }

    pub fn ppm_to_hz(&self, ppm: f64) -> f64 {
        (ppm - WATER_SHIFT_PPM) * self.reference_frequency
    }
}

/// Ground-truth parameters of one voxel's signal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidParams {
    pub amplitudes: Vec<f64>,
    /// Global frequency shift, Hz.
    pub delta_f: f64,
    /// Additive change to every T2*, seconds.
    pub delta_t: f64,
    /// Zero-order phase, radians in [0, 2 pi).
    pub phase: f64,
    /// Per-component SD of the complex time-domain noise.
    pub noise_sd: f64,
}

impl FidParams {
    /// Parameters with no distortion and no noise.
    pub fn ideal(amplitudes: Vec<f64>) -> Self {
        FidParams {
            amplitudes,
            delta_f: 0.0,
            delta_t: 0.0,
            phase: 0.0,
            noise_sd: 0.0,
        }
    }

    pub fn validate(&self, priors: &[MetabolitePrior]) -> Result<()> {
        if self.amplitudes.len() != priors.len() {
            return Err(Error::shape(
                format!("{} amplitudes", priors.len()),
                self.amplitudes.len(),
            ));
        }
        if self.amplitudes.iter().any(|a| !(*a >= 0.0) || !a.is_finite()) {
            return Err(Error::invalid("amplitudes must be finite and nonnegative"));
        }
        if !(0.0..2.0 * PI).contains(&self.phase) {
            return Err(Error::invalid(format!(
                "phase {} outside [0, 2pi)",
                self.phase
            )));
        }
        if !(self.noise_sd >= 0.0) || !self.delta_f.is_finite() {
            return Err(Error::invalid("noise SD must be >= 0 and delta_f finite"));
        }
        for p in priors {
            if !(p.t2star + self.delta_t > 0.0) {
                return Err(Error::NonPhysicalDecay {
                    t2star: p.t2star,
                    delta_t: self.delta_t,
                });
            }
        }
        Ok(())
    }
}

/// Complex time-domain samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Fid {
    pub samples: Vec<Complex64>,
    pub grid: SpectralGrid,
}

impl Fid {
    pub fn new(samples: Vec<Complex64>, grid: SpectralGrid) -> Result<Self> {
        if samples.len() != grid.n_points {
            return Err(Error::shape(grid.n_points, samples.len()));
        }
        Ok(Fid { samples, grid })
    }

    pub fn zeros(grid: SpectralGrid) -> Self {
        Fid {
            samples: vec![Complex64::new(0.0, 0.0); grid.n_points],
            grid,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Adds complex white noise with per-component SD `sigma`.
    pub fn add_noise<R: Rng + ?Sized>(&mut self, sigma: f64, rng: &mut R) {
        if sigma == 0.0 {
            return;
        }
        for s in &mut self.samples {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            *s += Complex64::new(sigma * re, sigma * im);
        }
    }
}

/// Frequency-domain view of an FID, bins in ascending frequency order.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    pub bins: Vec<Complex64>,
    pub grid: SpectralGrid,
}

impl Spectrum {
    pub fn frequency(&self, j: usize) -> f64 {
        self.grid.bin_frequency(j)
    }

    pub fn magnitude(&self) -> Vec<f64> {
        self.bins.iter().map(|b| b.norm()).collect()
    }

    /// Inverse of [`dft_spectrum`].
    pub fn to_fid(&self) -> Fid {
        let n = self.bins.len();
        let shift = n / 2;
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for (j, b) in self.bins.iter().enumerate() {
            buf[(j + n - shift) % n] = *b;
        }
        fft_plan(n, true).process(&mut buf);
        let scale = 1.0 / n as f64;
        for v in &mut buf {
            *v *= scale;
        }
        Fid {
            samples: buf,
            grid: self.grid,
        }
    }

    /// Indices of the bins whose frequency lies in `[lo, hi]`.
    pub fn bins_in(&self, lo: f64, hi: f64) -> std::ops::Range<usize> {
        bins_in(&self.grid, lo, hi)
    }
}

pub(crate) fn bins_in(grid: &SpectralGrid, lo: f64, hi: f64) -> std::ops::Range<usize> {
    let df = grid.frequency_resolution();
    let half = (grid.n_points / 2) as f64;
    let first = ((lo / df).ceil() + half).max(0.0) as usize;
    let last = ((hi / df).floor() + half + 1.0).clamp(0.0, grid.n_points as f64) as usize;
    first.min(last)..last
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn fft_plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(n)
        } else {
            p.plan_fft_forward(n)
        }
    })
}

/// Noise-free part of the distorted signal model, written into `out`.
///
/// Each line is generated with a complex recurrence; with zero distortion
/// this evaluates the ideal model along exactly the same arithmetic path.
pub(crate) fn deterministic_signal_into(
    params: &FidParams,
    priors: &[MetabolitePrior],
    grid: &SpectralGrid,
    out: &mut [Complex64],
) {
    out.iter_mut().for_each(|s| *s = Complex64::new(0.0, 0.0));
    let dt = grid.dwell_time();
    let rot = Complex64::from_polar(1.0, params.phase);
    for (prior, &amp) in priors.iter().zip(&params.amplitudes) {
        if amp == 0.0 {
            continue;
        }
        let freq = prior.offset_hz(grid) + params.delta_f;
        let decay = 1.0 / (prior.t2star + params.delta_t);
        let step = Complex64::new(-decay * dt, 2.0 * PI * freq * dt).exp();
        let mut cur = rot * amp;
        for s in out.iter_mut() {
            *s += cur;
            cur *= step;
        }
    }
}

/// Ideal FID: a sum of undistorted, noise-free damped complex exponentials.
pub fn synth_ideal_fid(
    params: &FidParams,
    priors: &[MetabolitePrior],
    grid: &SpectralGrid,
) -> Result<Fid> {
    if params.delta_f != 0.0 || params.delta_t != 0.0 || params.phase != 0.0 || params.noise_sd != 0.0
    {
        return Err(Error::invalid(
            "ideal FID requires zero frequency shift, broadening, phase and noise",
        ));
    }
    params.validate(priors)?;
    let mut fid = Fid::zeros(*grid);
    deterministic_signal_into(params, priors, grid, &mut fid.samples);
    Ok(fid)
}

/// Realistic FID: shifted, broadened and phased lines plus complex Gaussian
/// noise (independent real and imaginary parts, each with SD `noise_sd`).
pub fn synth_realistic_fid<R: Rng + ?Sized>(
    params: &FidParams,
    priors: &[MetabolitePrior],
    grid: &SpectralGrid,
    rng: &mut R,
) -> Result<Fid> {
    params.validate(priors)?;
    let mut fid = Fid::zeros(*grid);
    deterministic_signal_into(params, priors, grid, &mut fid.samples);
    fid.add_noise(params.noise_sd, rng);
    Ok(fid)
}

/// Forward DFT, bins reordered to ascending frequency.
pub fn dft_spectrum(fid: &Fid) -> Spectrum {
    let n = fid.samples.len();
    let mut buf = fid.samples.clone();
    fft_plan(n, false).process(&mut buf);
    let shift = n / 2;
    let bins = (0..n).map(|j| buf[(j + n - shift) % n]).collect();
    Spectrum {
        bins,
        grid: fid.grid,
    }
}

/// Water peak height divided by the spectral-domain noise SD.
///
/// The peak is the largest bin magnitude within +-0.5 ppm of water.
pub fn water_snr(spectrum: &Spectrum, noise_sd_spectral: f64) -> Result<f64> {
    if !(noise_sd_spectral > 0.0) {
        return Err(Error::invalid("spectral noise SD must be positive"));
    }
    Ok(water_peak_height(spectrum) / noise_sd_spectral)
}

pub(crate) fn water_peak_height(spectrum: &Spectrum) -> f64 {
    let half = WATER_SNR_WINDOW_PPM * spectrum.grid.reference_frequency;
    spectrum.bins[spectrum.bins_in(-half, half)]
        .iter()
        .map(|b| b.norm())
        .fold(0.0, f64::max)
}

/// Per-component noise SD of a spectrum, estimated from the outermost 10% of
/// bins (5% at each end of the axis).
///
/// First differences of neighbouring bins are used so that the slowly
/// varying tails of the resonances do not inflate the estimate.
pub fn spectral_noise_sd(spectrum: &Spectrum) -> f64 {
    let n = spectrum.bins.len();
    let edge = ((n as f64 * 0.05).round() as usize).max(2).min(n / 2);
    let mut acc = 0.0;
    let mut count = 0usize;
    for block in [&spectrum.bins[..edge], &spectrum.bins[n - edge..]] {
        for w in block.windows(2) {
            acc += (w[1] - w[0]).norm_sqr();
            count += 1;
        }
    }
    (acc / (4.0 * count as f64)).sqrt()
}

/// Time-domain noise SD implied by a spectral estimate.
pub fn time_noise_sd(spectrum: &Spectrum) -> f64 {
    spectral_noise_sd(spectrum) / (spectrum.bins.len() as f64).sqrt()
}

/// Converts a metabolite-to-water ratio into mM.
pub fn ratio_to_concentration(ratio: f64) -> Result<f64> {
    if !(ratio >= 0.0) {
        return Err(Error::invalid(format!("ratio must be >= 0, got {ratio}")));
    }
    Ok(ratio * WATER_CONCENTRATION_MM)
}

/// Wraps an angle into [0, 2 pi).
pub fn wrap_phase(phase: f64) -> f64 {
    let w = phase.rem_euclid(2.0 * PI);
    if w >= 2.0 * PI {
        0.0
    } else {
        w
    }
}
