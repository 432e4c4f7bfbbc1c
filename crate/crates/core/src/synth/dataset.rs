use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{Fid, SpectralGrid};
use crate::space::Dims;

/// Anatomical gray-level image co-registered with a DMI grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MriVolume {
    pub dims: Dims,
    pub data: Vec<f64>,
}

impl MriVolume {
    pub fn new(dims: Dims, data: Vec<f64>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::shape(dims.len(), data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("MRI values must be finite"));
        }
        Ok(MriVolume { dims, data })
    }

    /// Integer upsampling factor per axis relative to `dmi`.
    pub fn ratio_to(&self, dmi: Dims) -> Result<(usize, usize, usize)> {
        let f = |hi: usize, lo: usize| (hi % lo == 0 && hi >= lo).then(|| hi / lo);
        match (
            f(self.dims.nx, dmi.nx),
            f(self.dims.ny, dmi.ny),
            f(self.dims.nz, dmi.nz),
        ) {
            (Some(a), Some(b), Some(c)) => Ok((a, b, c)),
            _ => Err(Error::invalid(format!(
                "MRI grid {}x{}x{} is not an integer multiple of DMI grid {}x{}x{}",
                self.dims.nx, self.dims.ny, self.dims.nz, dmi.nx, dmi.ny, dmi.nz
            ))),
        }
    }
}

/// A spatial grid of FIDs with its anatomical prior and region of interest.
#[derive(Clone, Debug, PartialEq)]
pub struct DmiDataset {
    pub dims: Dims,
    pub grid: SpectralGrid,
    /// One FID per voxel, x fastest.
    pub fids: Vec<Fid>,
    pub mri: Option<MriVolume>,
    pub mask: Vec<bool>,
    /// Field of view, mm.
    pub fov_mm: [f64; 3],
    /// Global factor already applied to every FID.
    pub calibration: f64,
    /// Time-domain noise SD used to generate the data, if known.
    pub noise_sd: Option<f64>,
}

impl DmiDataset {
    pub fn new(
        dims: Dims,
        grid: SpectralGrid,
        fids: Vec<Fid>,
        mri: Option<MriVolume>,
        mask: Vec<bool>,
        fov_mm: [f64; 3],
    ) -> Result<Self> {
        let ds = DmiDataset {
            dims,
            grid,
            fids,
            mri,
            mask,
            fov_mm,
            calibration: 1.0,
            noise_sd: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.fids.len() != self.dims.len() {
            return Err(Error::shape(
                format!("{} FIDs", self.dims.len()),
                self.fids.len(),
            ));
        }
        if self.mask.len() != self.dims.len() {
            return Err(Error::shape(
                format!("{} mask entries", self.dims.len()),
                self.mask.len(),
            ));
        }
        if let Some(f) = self.fids.iter().find(|f| f.grid != self.grid || f.len() != self.grid.n_points) {
            return Err(Error::shape(self.grid.n_points, f.len()));
        }
        if let Some(mri) = &self.mri {
            mri.ratio_to(self.dims)?;
        }
        Ok(())
    }

    pub fn voxel_count(&self) -> usize {
        self.dims.len()
    }

    /// Indices of in-mask voxels in ascending order.
    pub fn masked(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&i| self.mask[i]).collect()
    }

    /// Multiplies every FID by `factor` and records it.
    pub fn scale(&mut self, factor: f64) {
        for f in &mut self.fids {
            for s in &mut f.samples {
                *s *= factor;
            }
        }
        self.calibration *= factor;
        if let Some(s) = self.noise_sd.as_mut() {
            *s *= factor;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_shapes() {
        let grid = SpectralGrid::new(8, 100.0, 10.0).unwrap();
        let dims = Dims::plane(2, 2);
        let fids = vec![Fid::zeros(grid); 4];
        assert!(DmiDataset::new(dims, grid, fids.clone(), None, vec![true; 4], [1.0; 3]).is_ok());
        assert!(DmiDataset::new(dims, grid, fids[..3].to_vec(), None, vec![true; 4], [1.0; 3]).is_err());
        assert!(DmiDataset::new(dims, grid, fids.clone(), None, vec![true; 3], [1.0; 3]).is_err());
        let mri = MriVolume::new(Dims::plane(5, 4), vec![0.0; 20]).unwrap();
        assert!(DmiDataset::new(dims, grid, fids, Some(mri), vec![true; 4], [1.0; 3]).is_err());
    }

    #[test]
    fn mri_ratio() {
        let mri = MriVolume::new(Dims::plane(10, 15), vec![0.0; 150]).unwrap();
        assert_eq!(mri.ratio_to(Dims::plane(2, 3)).unwrap(), (5, 5, 1));
        assert!(mri.ratio_to(Dims::plane(3, 3)).is_err());
    }
}
