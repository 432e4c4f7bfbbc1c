use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::space::Dims;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionConfig {
    /// Conduction threshold K as a percentage of the input value range.
    pub threshold_percent: f64,
    pub iterations: usize,
    pub step: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            threshold_percent: 10.0,
            iterations: 20,
            step: 0.2,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self, dims: Dims) -> Result<()> {
        let bound = if dims.is_3d() { 1.0 / 6.0 } else { 0.25 };
        if !(self.threshold_percent > 0.0) {
            return Err(Error::invalid("diffusion threshold must be positive"));
        }
        if !(self.step > 0.0 && self.step <= bound) {
            return Err(Error::invalid(format!(
                "diffusion step {} outside (0, {bound}]",
                self.step
            )));
        }
        Ok(())
    }
}

/// Perona-Malik diffusion with conduction `exp(-(d/K)^2)` over face
/// neighbours.
///
/// Missing voxels neither give nor receive flux, and the grid edge is
/// reflecting, so the sum over present voxels is conserved.
pub fn anisotropic_diffusion(
    map: &[Option<f64>],
    dims: Dims,
    config: &DiffusionConfig,
) -> Result<Vec<Option<f64>>> {
    config.validate(dims)?;
    if map.len() != dims.len() {
        return Err(Error::shape(dims.len(), map.len()));
    }
    if map.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("diffusion input must be finite"));
    }
    let (lo, hi) = map
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    if !(range > 0.0) {
        return Ok(map.to_vec());
    }
    let k = config.threshold_percent / 100.0 * range;
    let neighbours: Vec<Vec<usize>> = (0..dims.len())
        .map(|i| {
            dims.neighbors_face(i)
                .into_iter()
                .filter(|&j| j > i && map[j].is_some())
                .collect()
        })
        .collect();
    let mut u: Vec<f64> = map.iter().map(|v| v.unwrap_or(0.0)).collect();
    let mut flux = vec![0.0; u.len()];
    for _ in 0..config.iterations {
        flux.iter_mut().for_each(|f| *f = 0.0);
        for i in 0..u.len() {
            if map[i].is_none() {
                continue;
            }
            for &j in &neighbours[i] {
                let d = u[j] - u[i];
                let g = (-(d / k) * (d / k)).exp();
                let q = config.step * g * d;
                flux[i] += q;
                flux[j] -= q;
            }
        }
        for (v, f) in u.iter_mut().zip(&flux) {
            *v += f;
        }
    }
    Ok(map
        .iter()
        .zip(u)
        .map(|(m, v)| m.map(|_| v))
        .collect())
}
