use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::baselines::model_jacobian;
use crate::error::{Error, Result};
use crate::signal::{FidParams, MetabolitePrior, SpectralGrid};

/// Amplitude-dependent factor for the Glx bound:
/// `sqrt((A_w^2 + A_glc^2 + 2 A_glx^2 + A_lac^2) / sum A^2)`.
pub fn crlb_r_factor(amplitudes: &[f64; 4]) -> Result<f64> {
    let s: f64 = amplitudes.iter().map(|a| a * a).sum();
    if !(s > 0.0) {
        return Err(Error::invalid("amplitudes must not all be zero"));
    }
    Ok(((s + amplitudes[2] * amplitudes[2]) / s).sqrt())
}

fn check(t2: f64, ts: f64, sigma: f64) -> Result<()> {
    if !(t2 > 0.0) || !(ts > 0.0) || !(sigma >= 0.0) {
        return Err(Error::invalid(
            "relaxation time and sampling interval must be positive, sigma >= 0",
        ));
    }
    Ok(())
}

/// Closed-form Glx amplitude bound, literal reading:
/// `(2T)^(-1/4) * sqrt(t_s) * sigma * R`.
pub fn crlb_amplitude(t2: f64, ts: f64, sigma: f64, amplitudes: &[f64; 4]) -> Result<f64> {
    check(t2, ts, sigma)?;
    Ok((2.0 * t2).powf(-0.25) * ts.sqrt() * sigma * crlb_r_factor(amplitudes)?)
}

/// Alternative reading `sqrt(2 t_s / T) * sigma * R`, the continuous-time
/// limit of the single-line bound scaled by R.
pub fn crlb_amplitude_continuous(t2: f64, ts: f64, sigma: f64, amplitudes: &[f64; 4]) -> Result<f64> {
    check(t2, ts, sigma)?;
    Ok((2.0 * ts / t2).sqrt() * sigma * crlb_r_factor(amplitudes)?)
}

/// Exact amplitude bound of one damped line with known frequency, decay
/// and phase: `sigma / sqrt(sum_k exp(-2 t_k / T))`.
pub fn single_line_crlb(t2: f64, grid: &SpectralGrid, sigma: f64) -> Result<f64> {
    check(t2, grid.dwell_time(), sigma)?;
    let q = (-2.0 * grid.dwell_time() / t2).exp();
    let energy = (1.0 - q.powi(grid.n_points as i32)) / (1.0 - q);
    Ok(sigma / energy.sqrt())
}

fn bounds_from(jac: &[Vec<Complex64>], sigma: f64) -> Result<Vec<f64>> {
    let n = jac.len();
    let mut fim = DMatrix::<f64>::zeros(n, n);
    for a in 0..n {
        for b in a..n {
            let v: f64 = jac[a].iter().zip(&jac[b]).map(|(u, w)| (u.conj() * w).re).sum();
            fim[(a, b)] = v;
            fim[(b, a)] = v;
        }
    }
    let scale = (0..n).map(|a| fim[(a, a)]).fold(0.0, f64::max);
    let inv = fim
        .clone()
        .cholesky()
        .filter(|c| (0..n).all(|a| c.l()[(a, a)] * c.l()[(a, a)] > 1e-12 * scale))
        .ok_or_else(|| Error::Numerical("Fisher information matrix is singular".into()))?
        .inverse();
    Ok((0..n).map(|a| sigma * inv[(a, a)].sqrt()).collect())
}

fn theta(params: &FidParams) -> Vec<f64> {
    let mut t = params.amplitudes.clone();
    t.extend([params.delta_f, params.delta_t, params.phase]);
    t
}

/// Amplitude bounds from the Fisher information of the noise-free model
/// with every nonlinear parameter known. Complex noise has SD `sigma` per
/// component, so the information is `Re(B^H B) / sigma^2`.
pub fn fisher_crlb_numeric(
    priors: &[MetabolitePrior],
    grid: &SpectralGrid,
    params: &FidParams,
    sigma: f64,
) -> Result<Vec<f64>> {
    if !(sigma >= 0.0) {
        return Err(Error::invalid("sigma must be >= 0"));
    }
    params.validate(priors)?;
    let jac = model_jacobian(&theta(params), priors, grid)?;
    bounds_from(&jac[..priors.len()], sigma)
}

/// Bounds for amplitudes, shift, broadening and phase when all of them are
/// unknown, in that order.
pub fn fisher_crlb_full(
    priors: &[MetabolitePrior],
    grid: &SpectralGrid,
    params: &FidParams,
    sigma: f64,
) -> Result<Vec<f64>> {
    if !(sigma >= 0.0) {
        return Err(Error::invalid("sigma must be >= 0"));
    }
    params.validate(priors)?;
    let jac = model_jacobian(&theta(params), priors, grid)?;
    bounds_from(&jac, sigma)
}

/// One line of the closed-form versus numeric comparison for Glx.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrlbRow {
    pub sigma: f64,
    pub amplitudes: [f64; 4],
    pub r_factor: f64,
    pub literal: f64,
    pub continuous: f64,
    pub numeric_amplitude_only: f64,
    pub numeric_full: f64,
}

impl CrlbRow {
    /// Literal formula over the amplitude-only numeric bound.
    pub fn literal_ratio(&self) -> f64 {
        self.literal / self.numeric_amplitude_only
    }

    pub fn continuous_ratio(&self) -> f64 {
        self.continuous / self.numeric_amplitude_only
    }
}

/// Glx bounds under every formulation for each `(sigma, amplitudes)` case.
pub fn crlb_comparison(
    priors: &[MetabolitePrior],
    grid: &SpectralGrid,
    cases: &[(f64, [f64; 4])],
) -> Result<Vec<CrlbRow>> {
    if priors.len() != 4 {
        return Err(Error::shape(4, priors.len()));
    }
    let t2 = priors[2].t2star;
    let ts = grid.dwell_time();
    cases
        .iter()
        .map(|&(sigma, amplitudes)| {
            let p = FidParams::ideal(amplitudes.to_vec());
            Ok(CrlbRow {
                sigma,
                amplitudes,
                r_factor: crlb_r_factor(&amplitudes)?,
                literal: crlb_amplitude(t2, ts, sigma, &amplitudes)?,
                continuous: crlb_amplitude_continuous(t2, ts, sigma, &amplitudes)?,
                numeric_amplitude_only: fisher_crlb_numeric(priors, grid, &p, sigma)?[2],
                numeric_full: fisher_crlb_full(priors, grid, &p, sigma)?[2],
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::default_priors;

    #[test]
    fn zero_sigma_zero_bound() {
        assert_eq!(crlb_amplitude(0.032, 4e-4, 0.0, &[1.0, 0.3, 0.3, 0.1]).unwrap(), 0.0);
    }

    #[test]
    fn equal_amplitudes_r() {
        let r = crlb_r_factor(&[0.7; 4]).unwrap();
        assert!((r - 1.25f64.sqrt()).abs() < 1e-12);
        assert!((r - 1.1180).abs() < 1e-4);
    }

    #[test]
    fn numeric_bound_is_linear_in_sigma() {
        let priors = default_priors();
        let grid = SpectralGrid::default();
        let p = FidParams::ideal(vec![1.0, 0.3, 0.3, 0.1]);
        let a = fisher_crlb_numeric(&priors, &grid, &p, 0.1).unwrap();
        let b = fisher_crlb_numeric(&priors, &grid, &p, 0.2).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((y - 2.0 * x).abs() < 1e-12 * y);
        }
    }

    #[test]
    fn separated_lines_decouple() {
        let priors = default_priors();
        let grid = SpectralGrid::default();
        let p = FidParams::ideal(vec![1.0, 0.3, 0.3, 0.1]);
        let joint = fisher_crlb_numeric(&priors, &grid, &p, 0.1).unwrap();
        // Glx and Lac are far from their neighbours
        for m in [2, 3] {
            let single = single_line_crlb(priors[m].t2star, &grid, 0.1).unwrap();
            assert!((joint[m] / single - 1.0).abs() < 0.01, "{m}");
        }
    }

    #[test]
    fn singular_design_rejected() {
        let p1 = MetabolitePrior::new("a", 3.0, 0.02).unwrap();
        let priors = vec![p1.clone(), p1];
        let grid = SpectralGrid::default();
        let r = fisher_crlb_numeric(&priors, &grid, &FidParams::ideal(vec![1.0, 1.0]), 0.1);
        assert!(r.unwrap_err().is_numerical());
    }

    #[test]
    fn nuisance_parameters_raise_the_bound() {
        let priors = default_priors();
        let grid = SpectralGrid::default();
        let p = FidParams::ideal(vec![1.0, 0.35, 0.4, 0.1]);
        let a = fisher_crlb_numeric(&priors, &grid, &p, 0.1).unwrap();
        let f = fisher_crlb_full(&priors, &grid, &p, 0.1).unwrap();
        for m in 0..4 {
            assert!(f[m] >= a[m] * (1.0 - 1e-9));
        }
    }
}
