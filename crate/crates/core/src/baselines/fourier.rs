use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{dft_spectrum, Fid, MetabolitePrior, SpectralGrid};

/// Which part of the spectrum is integrated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FourierMode {
    /// Magnitude spectrum; insensitive to zero-order phase.
    #[default]
    Magnitude,
    /// Real part; exactly linear in the FID but needs phased data.
    Real,
}

/// Per-metabolite integration windows in Hz, half-open `[lo, hi)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegrationWindows {
    pub windows: Vec<[f64; 2]>,
    #[serde(default)]
    pub mode: FourierMode,
}

impl IntegrationWindows {
    /// Rejects empty, unordered or overlapping windows.
    pub fn new(windows: Vec<[f64; 2]>, mode: FourierMode) -> Result<Self> {
        let w = IntegrationWindows { windows, mode };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.windows.iter().any(|[lo, hi]| !(lo < hi)) {
            return Err(Error::invalid("integration windows must be non-empty"));
        }
        let mut sorted = self.windows.clone();
        sorted.sort_by(|a, b| a[0].total_cmp(&b[0]));
        if sorted.windows(2).any(|p| p[0][1] > p[1][0]) {
            return Err(Error::invalid("integration windows overlap"));
        }
        Ok(())
    }

    /// Nominal line position +-3/(pi T2*). Where two such windows would
    /// overlap, both are cut at the midpoint between the line centres.
    pub fn from_priors(priors: &[MetabolitePrior], grid: &SpectralGrid) -> Self {
        let centres: Vec<f64> = priors.iter().map(|p| p.offset_hz(grid)).collect();
        let mut windows: Vec<[f64; 2]> = priors
            .iter()
            .zip(&centres)
            .map(|(p, c)| {
                let half = 3.0 / (PI * p.t2star);
                [c - half, c + half]
            })
            .collect();
        for a in 0..windows.len() {
            for b in 0..windows.len() {
                let (ca, cb) = (centres[a], centres[b]);
                if ca < cb && windows[a][1] > windows[b][0] {
                    let mid = 0.5 * (ca + cb);
                    windows[a][1] = windows[a][1].min(mid);
                    windows[b][0] = windows[b][0].max(mid);
                }
            }
        }
        IntegrationWindows {
            windows,
            mode: FourierMode::Magnitude,
        }
    }
}

fn in_window(grid: &SpectralGrid, w: [f64; 2]) -> impl Iterator<Item = usize> + '_ {
    (0..grid.n_points).filter(move |&j| {
        let f = grid.bin_frequency(j);
        f >= w[0] && f < w[1]
    })
}

/// Closed-form DFT bin of a unit line: a finite geometric series.
fn unit_line_bin(grid: &SpectralGrid, freq: f64, t2star: f64, j: usize) -> Complex64 {
    let n = grid.n_points as f64;
    let dt = grid.dwell_time();
    let z = Complex64::new(-dt / t2star, 2.0 * PI * freq * dt).exp();
    let k = j as f64 - n / 2.0;
    let w = Complex64::from_polar(1.0, -2.0 * PI * k / n);
    let zn = Complex64::new(-n * dt / t2star, 2.0 * PI * freq * dt * n).exp();
    (Complex64::new(1.0, 0.0) - zn) / (Complex64::new(1.0, 0.0) - z * w)
}

fn integrate(bins: impl Iterator<Item = Complex64>, mode: FourierMode) -> f64 {
    match mode {
        FourierMode::Magnitude => bins.map(|b| b.norm()).sum(),
        FourierMode::Real => bins.map(|b| b.re).sum(),
    }
}

/// Peak integrals over each window, divided by the integral of a
/// unit-amplitude undistorted line of that metabolite.
pub fn fourier_amplitudes(
    fid: &Fid,
    windows: &IntegrationWindows,
    priors: &[MetabolitePrior],
) -> Result<Vec<f64>> {
    windows.validate()?;
    if windows.windows.len() != priors.len() {
        return Err(Error::shape(priors.len(), windows.windows.len()));
    }
    let grid = fid.grid;
    let nyq = grid.spectral_width / 2.0;
    if windows
        .windows
        .iter()
        .any(|[lo, hi]| *lo < -nyq || *hi > nyq)
    {
        return Err(Error::invalid("integration window outside the spectral range"));
    }
    let spec = dft_spectrum(fid);
    priors
        .iter()
        .zip(&windows.windows)
        .map(|(p, &w)| {
            let f0 = p.offset_hz(&grid);
            let reference = integrate(
                in_window(&grid, w).map(|j| unit_line_bin(&grid, f0, p.t2star, j)),
                windows.mode,
            );
            if !(reference > 0.0) {
                return Err(Error::invalid(format!(
                    "window for {} contains no reference signal",
                    p.name
                )));
            }
            Ok(integrate(in_window(&grid, w).map(|j| spec.bins[j]), windows.mode) / reference)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{default_priors, synth_ideal_fid, synth_realistic_fid, FidParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (Vec<MetabolitePrior>, SpectralGrid, IntegrationWindows) {
        let priors = default_priors();
        let grid = SpectralGrid::default();
        let w = IntegrationWindows::from_priors(&priors, &grid);
        (priors, grid, w)
    }

    #[test]
    fn default_windows_are_disjoint() {
        let (_, _, w) = setup();
        w.validate().unwrap();
        assert!(w.windows[0][0] > w.windows[1][0]);
    }

    #[test]
    fn closed_form_bins_match_fft() {
        let (priors, grid, _) = setup();
        let fid = synth_ideal_fid(&FidParams::ideal(vec![0.0, 0.0, 1.0, 0.0]), &priors, &grid).unwrap();
        let spec = dft_spectrum(&fid);
        let f0 = priors[2].offset_hz(&grid);
        for j in [0, 100, 219, 256, 511] {
            let d = (spec.bins[j] - unit_line_bin(&grid, f0, priors[2].t2star, j)).norm();
            assert!(d < 1e-9 * (1.0 + spec.bins[j].norm()));
        }
    }

    #[test]
    fn single_line_recovered() {
        let (priors, grid, w) = setup();
        for m in 0..4 {
            let mut a = vec![0.0; 4];
            a[m] = 1.0;
            let fid = synth_ideal_fid(&FidParams::ideal(a), &priors, &grid).unwrap();
            let est = fourier_amplitudes(&fid, &w, &priors).unwrap();
            assert!((est[m] - 1.0).abs() < 0.05, "{m}: {}", est[m]);
        }
    }

    #[test]
    fn zero_fid_gives_zero() {
        let (priors, grid, w) = setup();
        let est = fourier_amplitudes(&Fid::zeros(grid), &w, &priors).unwrap();
        assert!(est.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn shifted_peak_is_underestimated() {
        let (priors, grid, w) = setup();
        let p = FidParams {
            delta_f: 40.0,
            ..FidParams::ideal(vec![0.0, 0.0, 0.0, 1.0])
        };
        let fid = synth_realistic_fid(&p, &priors, &grid, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let est = fourier_amplitudes(&fid, &w, &priors).unwrap();
        assert!(est[3] < 0.5);
    }

    #[test]
    fn overlapping_windows_rejected() {
        assert!(IntegrationWindows::new(vec![[0.0, 10.0], [5.0, 20.0]], FourierMode::Magnitude).is_err());
        assert!(IntegrationWindows::new(vec![[0.0, 10.0], [10.0, 20.0]], FourierMode::Magnitude).is_ok());
        assert!(IntegrationWindows::new(vec![[3.0, 3.0]], FourierMode::Real).is_err());
    }

    #[test]
    fn real_mode_is_linear() {
        let (priors, grid, mut w) = setup();
        w.mode = FourierMode::Real;
        let f1 = synth_ideal_fid(&FidParams::ideal(vec![1.0, 0.2, 0.0, 0.4]), &priors, &grid).unwrap();
        let f2 = synth_ideal_fid(&FidParams::ideal(vec![0.0, 0.7, 0.3, 0.1]), &priors, &grid).unwrap();
        let mut sum = f1.clone();
        for (s, b) in sum.samples.iter_mut().zip(&f2.samples) {
            *s += b;
        }
        let (e1, e2, es) = (
            fourier_amplitudes(&f1, &w, &priors).unwrap(),
            fourier_amplitudes(&f2, &w, &priors).unwrap(),
            fourier_amplitudes(&sum, &w, &priors).unwrap(),
        );
        for m in 0..4 {
            assert!((es[m] - e1[m] - e2[m]).abs() < 1e-12);
        }
    }

    #[test]
    fn magnitude_mode_is_phase_invariant() {
        let (priors, grid, w) = setup();
        let a = vec![1.0, 0.3, 0.3, 0.1];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let base = fourier_amplitudes(
            &synth_realistic_fid(&FidParams::ideal(a.clone()), &priors, &grid, &mut rng).unwrap(),
            &w,
            &priors,
        )
        .unwrap();
        let p = FidParams {
            phase: 2.0,
            ..FidParams::ideal(a)
        };
        let rot = fourier_amplitudes(&synth_realistic_fid(&p, &priors, &grid, &mut rng).unwrap(), &w, &priors)
            .unwrap();
        for m in 0..4 {
            assert!((base[m] - rot[m]).abs() < 1e-10);
        }
    }
}
