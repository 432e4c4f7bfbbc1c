use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{DmiDataset, MriVolume};
use crate::error::{Error, Result};
use crate::signal::{
    bins_in, deterministic_signal_into, dft_spectrum, Fid, FidParams, MetabolitePrior,
    SpectralGrid, WATER_SNR_WINDOW_PPM,
};
use crate::space::Dims;

/// Tumor scenario by MRI visibility and metabolic abnormality.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TumorScenario {
    /// Normal MRI, normal DMI (true negative).
    A,
    /// Normal MRI, abnormal DMI (false negative).
    B,
    /// Tumor MRI, abnormal DMI (true positive).
    C,
    /// Tumor MRI, normal DMI (false positive).
    D,
}

impl TumorScenario {
    pub const ALL: [TumorScenario; 4] = [Self::A, Self::B, Self::C, Self::D];

    pub fn mri_visible(self) -> bool {
        matches!(self, Self::C | Self::D)
    }

    pub fn dmi_abnormal(self) -> bool {
        matches!(self, Self::B | Self::C)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompartmentProfile {
    /// Water, Glc, Glx, Lac as ratios to water.
    pub amplitudes: Vec<f64>,
    /// MRI gray level.
    pub gray: f64,
}

/// Corner voxel of a square tumor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TumorPlacement {
    pub scenario: TumorScenario,
    pub x: usize,
    pub y: usize,
}

/// Gaussian off-resonance hotspot. Intra-voxel dephasing is modelled as a
/// T2* reduction proportional to the local field gradient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct B0Config {
    pub peak_hz: f64,
    /// Hotspot centre relative to the FOV centre, mm.
    pub center_mm: [f64; 2],
    pub width_mm: f64,
    /// Seconds of T2* lost per Hz/mm of gradient.
    pub broadening: f64,
    /// Upper bound on the T2* loss, seconds.
    pub max_broadening: f64,
}

impl Default for B0Config {
    fn default() -> Self {
        B0Config {
            peak_hz: 30.0,
            center_mm: [0.0, -55.0],
            width_mm: 20.0,
            broadening: 0.008,
            max_broadening: 0.008,
        }
    }
}

/// Radial transmit falloff: scale 1 at the centre, `edge_scale` at the mask
/// radius.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct B1Config {
    pub edge_scale: f64,
}

impl Default for B1Config {
    fn default() -> Self {
        B1Config { edge_scale: 0.85 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub matrix: [usize; 2],
    /// MRI pixels per DMI voxel along each axis.
    pub mri_factor: usize,
    pub fov_mm: f64,
    pub mask_radius_mm: f64,
    /// Outer radii of compartments 2 and 3; compartment 1 fills the rest of
    /// the mask.
    pub compartment_radii_mm: [f64; 2],
    pub compartments: [CompartmentProfile; 3],
    pub abnormal: Vec<f64>,
    pub tumor_gray: f64,
    /// Edge length in voxels: 1, 2 or 4.
    pub tumor_size: usize,
    /// Explicit placements; `None` puts A-D on the diagonals of compartment 2.
    pub tumors: Option<Vec<TumorPlacement>>,
    pub tumor_ring_mm: f64,
    pub b0: Option<B0Config>,
    pub b1: Option<B1Config>,
    pub phase: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        let prof = |a: [f64; 4], gray| CompartmentProfile {
            amplitudes: a.to_vec(),
            gray,
        };
        PhantomConfig {
            matrix: [32, 32],
            mri_factor: 5,
            fov_mm: 160.0,
            mask_radius_mm: 77.5,
            compartment_radii_mm: [60.0, 30.0],
            compartments: [
                prof([1.0, 0.25, 0.20, 0.05], 0.3),
                prof([1.0, 0.30, 0.30, 0.08], 0.6),
                prof([1.0, 0.35, 0.40, 0.10], 0.9),
            ],
            abnormal: vec![1.0, 0.30, 0.15, 0.30],
            tumor_gray: 1.0,
            tumor_size: 2,
            tumors: None,
            tumor_ring_mm: 45.0,
            b0: None,
            b1: None,
            phase: 0.0,
        }
    }
}

/// Simulation phantom on the DMI grid with its MRI.
#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub config: PhantomConfig,
    pub dims: Dims,
    /// 0 outside the mask, else compartment 1..=3.
    pub labels: Vec<u8>,
    pub tumors: Vec<Option<TumorScenario>>,
    /// True amplitude ratios to water per voxel; zeros outside the mask.
    pub truth: Vec<Vec<f64>>,
    pub mri: MriVolume,
    /// Hz
    pub b0_map: Option<Vec<f64>>,
    pub b1_map: Option<Vec<f64>>,
    /// Per-voxel additive T2* change, seconds.
    pub delta_t: Vec<f64>,
}

impl Phantom {
    pub fn mask(&self) -> Vec<bool> {
        self.labels.iter().map(|&l| l != 0).collect()
    }

    pub fn voxel_mm(&self) -> f64 {
        self.config.fov_mm / self.dims.nx as f64
    }

    /// Signal parameters of voxel `i`, noise excluded.
    pub fn voxel_params(&self, i: usize) -> FidParams {
        let scale = self.b1_map.as_ref().map_or(1.0, |m| m[i]);
        FidParams {
            amplitudes: self.truth[i].iter().map(|a| a * scale).collect(),
            delta_f: self.b0_map.as_ref().map_or(0.0, |m| m[i]),
            delta_t: self.delta_t[i],
            phase: self.config.phase,
            noise_sd: 0.0,
        }
    }

    pub fn clean_fids(&self, priors: &[MetabolitePrior], grid: &SpectralGrid) -> Result<Vec<Fid>> {
        (0..self.dims.len())
            .map(|i| {
                let p = self.voxel_params(i);
                p.validate(priors)?;
                let mut f = Fid::zeros(*grid);
                deterministic_signal_into(&p, priors, grid, &mut f.samples);
                Ok(f)
            })
            .collect()
    }

    /// Voxels of compartment `label` without tumor whose full neighbourhood
    /// shares the label and is tumor-free.
    pub fn interior(&self, label: u8) -> Vec<usize> {
        (0..self.dims.len())
            .filter(|&i| {
                self.labels[i] == label
                    && self.tumors[i].is_none()
                    && self
                        .dims
                        .neighbors_full(i)
                        .iter()
                        .all(|&j| self.labels[j] == label && self.tumors[j].is_none())
            })
            .collect()
    }

    /// In-mask voxels with an in-mask neighbour of a different MRI gray level.
    pub fn mri_border(&self) -> Vec<usize> {
        let g = self.dmi_gray();
        (0..self.dims.len())
            .filter(|&i| {
                self.labels[i] != 0
                    && self
                        .dims
                        .neighbors_full(i)
                        .iter()
                        .any(|&j| self.labels[j] != 0 && g[j] != g[i])
            })
            .collect()
    }

    pub fn tumor_voxels(&self, scenario: TumorScenario) -> Vec<usize> {
        (0..self.dims.len())
            .filter(|&i| self.tumors[i] == Some(scenario))
            .collect()
    }

    /// In-mask voxels touching tumor `scenario` but not part of any tumor.
    pub fn tumor_surround(&self, scenario: TumorScenario) -> Vec<usize> {
        (0..self.dims.len())
            .filter(|&i| {
                self.labels[i] != 0
                    && self.tumors[i].is_none()
                    && self
                        .dims
                        .neighbors_full(i)
                        .iter()
                        .any(|&j| self.tumors[j] == Some(scenario))
            })
            .collect()
    }

    /// MRI gray level of each DMI voxel before upsampling.
    pub fn dmi_gray(&self) -> Vec<f64> {
        (0..self.dims.len())
            .map(|i| self.gray_of(self.labels[i], self.tumors[i]))
            .collect()
    }

    fn gray_of(&self, label: u8, tumor: Option<TumorScenario>) -> f64 {
        match (label, tumor) {
            (0, _) => 0.0,
            (_, Some(s)) if s.mri_visible() => self.config.tumor_gray,
            (l, _) => self.config.compartments[l as usize - 1].gray,
        }
    }
}

fn validate(cfg: &PhantomConfig) -> Result<()> {
    let [nx, ny] = cfg.matrix;
    if nx == 0 || ny == 0 || nx != ny || cfg.mri_factor == 0 {
        return Err(Error::invalid("phantom matrix must be square and nonempty"));
    }
    if !(cfg.fov_mm > 0.0) {
        return Err(Error::invalid("FOV must be positive"));
    }
    let [r2, r3] = cfg.compartment_radii_mm;
    if !(0.0 < r3 && r3 < r2 && r2 < cfg.mask_radius_mm) {
        return Err(Error::invalid(
            "compartment radii must satisfy 0 < r3 < r2 < mask radius",
        ));
    }
    if ![1, 2, 4].contains(&cfg.tumor_size) {
        return Err(Error::invalid(format!(
            "tumor size must be 1, 2 or 4 voxels, got {}",
            cfg.tumor_size
        )));
    }
    let m = cfg.abnormal.len();
    if cfg.compartments.iter().any(|c| c.amplitudes.len() != m)
        || cfg
            .compartments
            .iter()
            .flat_map(|c| &c.amplitudes)
            .chain(&cfg.abnormal)
            .any(|a| !(*a >= 0.0))
    {
        return Err(Error::invalid(
            "compartment profiles must share one length and be nonnegative",
        ));
    }
    if let Some(b1) = &cfg.b1 {
        if !(b1.edge_scale > 0.0) {
            return Err(Error::invalid("B1 edge scale must be positive"));
        }
    }
    if let Some(b0) = &cfg.b0 {
        if !(b0.width_mm > 0.0) || !(b0.broadening >= 0.0) || !(b0.max_broadening >= 0.0) {
            return Err(Error::invalid("invalid B0 hotspot"));
        }
    }
    Ok(())
}

fn default_placements(cfg: &PhantomConfig) -> Vec<TumorPlacement> {
    let n = cfg.matrix[0] as f64;
    let vox = cfg.fov_mm / n;
    let d = cfg.tumor_ring_mm / std::f64::consts::SQRT_2 / vox;
    let s = cfg.tumor_size as f64;
    let corner = |sign: f64| (n / 2.0 + sign * d - s / 2.0).round().max(0.0) as usize;
    [
        (TumorScenario::A, -1.0, -1.0),
        (TumorScenario::B, 1.0, -1.0),
        (TumorScenario::C, -1.0, 1.0),
        (TumorScenario::D, 1.0, 1.0),
    ]
    .into_iter()
    .map(|(scenario, sx, sy)| TumorPlacement {
        scenario,
        x: corner(sx),
        y: corner(sy),
    })
    .collect()
}

/// Builds the ring phantom with tumors A-D and optional field maps.
pub fn build_phantom(config: &PhantomConfig) -> Result<Phantom> {
    validate(config)?;
    let cfg = config.clone();
    let n = cfg.matrix[0];
    let dims = Dims::plane(n, n);
    let vox = cfg.fov_mm / n as f64;
    let pos = |i: usize| {
        let (x, y, _) = dims.coords(i);
        (
            (x as f64 + 0.5) * vox - cfg.fov_mm / 2.0,
            (y as f64 + 0.5) * vox - cfg.fov_mm / 2.0,
        )
    };
    let [r2, r3] = cfg.compartment_radii_mm;
    let labels: Vec<u8> = (0..dims.len())
        .map(|i| {
            let (x, y) = pos(i);
            let r = x.hypot(y);
            if r >= cfg.mask_radius_mm {
                0
            } else if r >= r2 {
                1
            } else if r >= r3 {
                2
            } else {
                3
            }
        })
        .collect();

    let placements = cfg.tumors.clone().unwrap_or_else(|| default_placements(&cfg));
    let mut tumors = vec![None; dims.len()];
    for p in &placements {
        for dy in 0..cfg.tumor_size {
            for dx in 0..cfg.tumor_size {
                let (x, y) = (p.x + dx, p.y + dy);
                if x >= n || y >= n {
                    return Err(Error::invalid(format!(
                        "tumor {:?} extends beyond the grid",
                        p.scenario
                    )));
                }
                let i = dims.index(x, y, 0);
                if labels[i] == 0 {
                    return Err(Error::invalid(format!(
                        "tumor {:?} extends outside the mask",
                        p.scenario
                    )));
                }
                if tumors[i].is_some() {
                    return Err(Error::invalid(format!(
                        "tumor {:?} overlaps another placement",
                        p.scenario
                    )));
                }
                tumors[i] = Some(p.scenario);
            }
        }
    }

    let m = cfg.abnormal.len();
    let truth: Vec<Vec<f64>> = (0..dims.len())
        .map(|i| match (labels[i], tumors[i]) {
            (0, _) => vec![0.0; m],
            (_, Some(s)) if s.dmi_abnormal() => cfg.abnormal.clone(),
            (l, _) => cfg.compartments[l as usize - 1].amplitudes.clone(),
        })
        .collect();

    let (b0_map, delta_t) = match &cfg.b0 {
        None => (None, vec![0.0; dims.len()]),
        Some(b0) => {
            let mut map = Vec::with_capacity(dims.len());
            let mut dt = Vec::with_capacity(dims.len());
            for i in 0..dims.len() {
                let (x, y) = pos(i);
                let (dx, dy) = (x - b0.center_mm[0], y - b0.center_mm[1]);
                let d2 = dx * dx + dy * dy;
                let w2 = b0.width_mm * b0.width_mm;
                let f = b0.peak_hz * (-d2 / (2.0 * w2)).exp();
                let grad = f.abs() * d2.sqrt() / w2;
                map.push(f);
                dt.push(-(b0.broadening * grad).min(b0.max_broadening));
            }
            (Some(map), dt)
        }
    };
    let b1_map = cfg.b1.as_ref().map(|b1| {
        (0..dims.len())
            .map(|i| {
                let (x, y) = pos(i);
                let rho = (x.hypot(y) / cfg.mask_radius_mm).min(1.0);
                1.0 - (1.0 - b1.edge_scale) * rho * rho
            })
            .collect()
    });

    let mut phantom = Phantom {
        config: cfg,
        dims,
        labels,
        tumors,
        truth,
        mri: MriVolume {
            dims: Dims::plane(1, 1),
            data: vec![0.0],
        },
        b0_map,
        b1_map,
        delta_t,
    };
    let f = phantom.config.mri_factor;
    let mdims = Dims::plane(n * f, n * f);
    let gray = phantom.dmi_gray();
    let data = (0..mdims.len())
        .map(|j| {
            let (x, y, _) = mdims.coords(j);
            gray[dims.index(x / f, y / f, 0)]
        })
        .collect();
    phantom.mri = MriVolume::new(mdims, data)?;
    Ok(phantom)
}

const CALIBRATION_SEED: u64 = 0x5ca1_ab1e;
const CALIBRATION_DRAWS: usize = 256;

/// Time-domain noise SD at which the mean realized water SNR of `clean`
/// equals `target`.
///
/// Realized SNR is the noisy water peak over the injected spectral noise SD,
/// averaged over a fixed set of calibration noise draws, so the answer is a
/// deterministic function of the inputs.
pub fn noise_sd_for_snr(clean: &[&Fid], target: f64) -> Result<f64> {
    if clean.is_empty() {
        return Err(Error::invalid("no voxels to calibrate on"));
    }
    if !(target > 0.0) || !target.is_finite() {
        return Err(Error::invalid(format!("unreachable SNR target {target}")));
    }
    let grid = clean[0].grid;
    let n = grid.n_points;
    let half = WATER_SNR_WINDOW_PPM * grid.reference_frequency;
    let window = bins_in(&grid, -half, half);
    let reps = CALIBRATION_DRAWS.div_ceil(clean.len());
    let mut rng = ChaCha8Rng::seed_from_u64(CALIBRATION_SEED);
    let mut cases = Vec::with_capacity(clean.len() * reps);
    for fid in clean {
        let s = dft_spectrum(fid).bins[window.clone()].to_vec();
        for _ in 0..reps {
            let mut z = Fid::zeros(grid);
            z.add_noise(1.0, &mut rng);
            let zb = dft_spectrum(&z).bins[window.clone()].to_vec();
            cases.push((s.clone(), zb));
        }
    }
    let root_n = (n as f64).sqrt();
    let realized = |sigma: f64| {
        cases
            .iter()
            .map(|(s, z)| {
                s.iter()
                    .zip(z)
                    .map(|(a, b)| (a + b * sigma).norm())
                    .fold(0.0, f64::max)
                    / (sigma * root_n)
            })
            .sum::<f64>()
            / cases.len() as f64
    };
    let peak = cases
        .iter()
        .map(|(s, _)| s.iter().map(|v| v.norm()).fold(0.0, f64::max))
        .sum::<f64>()
        / cases.len() as f64;
    if !(peak > 0.0) {
        return Err(Error::invalid("calibration voxels carry no water signal"));
    }
    let floor = realized(peak * 1e6);
    if target <= floor * 1.01 {
        return Err(Error::invalid(format!(
            "SNR {target} is below the pure-noise floor {floor:.3}"
        )));
    }
    let mut lo = peak / (target * root_n);
    let mut hi = lo;
    while realized(lo) < target {
        lo *= 0.5;
    }
    while realized(hi) > target {
        hi *= 2.0;
    }
    for _ in 0..60 {
        let mid = (lo * hi).sqrt();
        if realized(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((lo * hi).sqrt())
}

/// Noise SD that gives the phantom's compartment-3 voxels the target water
/// SNR.
pub fn phantom_noise_sd(phantom: &Phantom, clean: &[Fid], target_water_snr: f64) -> Result<f64> {
    let mut cal: Vec<&Fid> = phantom.interior(3).iter().map(|&i| &clean[i]).collect();
    if cal.is_empty() {
        cal = (0..clean.len())
            .filter(|&i| phantom.labels[i] == 3)
            .map(|i| &clean[i])
            .collect();
    }
    noise_sd_for_snr(&cal, target_water_snr)
}

/// One noisy acquisition of the phantom at a fixed noise SD.
///
/// Voxel `i` draws its noise from stream `i` of `seed`.
pub fn noisy_realization(phantom: &Phantom, clean: &[Fid], sigma: f64, seed: u64) -> Result<DmiDataset> {
    if clean.len() != phantom.dims.len() {
        return Err(Error::shape(phantom.dims.len(), clean.len()));
    }
    if !(sigma >= 0.0) {
        return Err(Error::invalid("noise SD must be >= 0"));
    }
    let grid = clean[0].grid;
    let fids = clean
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut f = f.clone();
            f.add_noise(sigma, &mut rng);
            f
        })
        .collect();
    let vox = phantom.voxel_mm();
    let mut ds = DmiDataset::new(
        phantom.dims,
        grid,
        fids,
        Some(phantom.mri.clone()),
        phantom.mask(),
        [phantom.config.fov_mm, phantom.config.fov_mm, vox],
    )?;
    ds.noise_sd = Some(sigma);
    Ok(ds)
}

/// Synthesizes the phantom's DMI dataset at a target water SNR.
pub fn phantom_to_dmi(
    phantom: &Phantom,
    priors: &[MetabolitePrior],
    grid: &SpectralGrid,
    target_water_snr: f64,
    seed: u64,
) -> Result<DmiDataset> {
    let clean = phantom.clean_fids(priors, grid)?;
    let sigma = phantom_noise_sd(phantom, &clean, target_water_snr)?;
    noisy_realization(phantom, &clean, sigma, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_geometry() {
        let p = build_phantom(&PhantomConfig::default()).unwrap();
        assert_eq!(p.labels.len(), 32 * 32);
        assert_eq!((p.mri.dims.nx, p.mri.dims.ny), (160, 160));
        for l in 1..=3 {
            assert!(p.labels.contains(&l));
        }
        for s in TumorScenario::ALL {
            let v = p.tumor_voxels(s);
            assert_eq!(v.len(), 4);
            assert!(v.iter().all(|&i| p.labels[i] == 2));
        }
    }

    #[test]
    fn compartment_three_lac_is_tenth_of_water() {
        let p = build_phantom(&PhantomConfig::default()).unwrap();
        let i = p.interior(3)[0];
        assert!((p.truth[i][3] / p.truth[i][0] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn false_negative_is_invisible_in_mri() {
        let p = build_phantom(&PhantomConfig::default()).unwrap();
        let gray = p.dmi_gray();
        let ab = &p.config.abnormal;
        for i in p.tumor_voxels(TumorScenario::B) {
            assert_eq!(gray[i], p.config.compartments[1].gray);
            assert_eq!(&p.truth[i], ab);
            assert!(p.truth[i][2] < p.config.compartments[1].amplitudes[2]);
            assert!(p.truth[i][3] > p.config.compartments[1].amplitudes[3]);
        }
        for i in p.tumor_voxels(TumorScenario::D) {
            assert_eq!(gray[i], p.config.tumor_gray);
            assert_eq!(p.truth[i], p.config.compartments[1].amplitudes);
        }
    }

    #[test]
    fn rejects_bad_tumors() {
        let mut cfg = PhantomConfig {
            tumor_size: 3,
            ..PhantomConfig::default()
        };
        assert!(build_phantom(&cfg).is_err());
        cfg.tumor_size = 2;
        cfg.tumors = Some(vec![
            TumorPlacement {
                scenario: TumorScenario::B,
                x: 10,
                y: 10,
            },
            TumorPlacement {
                scenario: TumorScenario::C,
                x: 11,
                y: 11,
            },
        ]);
        assert!(build_phantom(&cfg).is_err());
    }

    #[test]
    fn sizes_fit_inside_compartment_two() {
        for size in [1, 2, 4] {
            let p = build_phantom(&PhantomConfig {
                tumor_size: size,
                ..PhantomConfig::default()
            })
            .unwrap();
            for s in TumorScenario::ALL {
                let v = p.tumor_voxels(s);
                assert_eq!(v.len(), size * size);
                assert!(v.iter().all(|&i| p.labels[i] == 2));
            }
        }
    }

    #[test]
    fn small_matrix_scales() {
        let p = build_phantom(&PhantomConfig {
            matrix: [16, 16],
            tumor_size: 1,
            ..PhantomConfig::default()
        })
        .unwrap();
        assert_eq!(p.mri.dims.nx, 80);
        assert!(!p.interior(3).is_empty());
    }

    #[test]
    fn b0_map_stays_in_training_range() {
        let p = build_phantom(&PhantomConfig {
            b0: Some(B0Config::default()),
            ..PhantomConfig::default()
        })
        .unwrap();
        let map = p.b0_map.as_ref().unwrap();
        assert!(map.iter().all(|f| (0.0..=30.0).contains(f)));
        assert!(p.delta_t.iter().all(|t| (-0.008..=0.0).contains(t)));
        assert!(p.delta_t.iter().any(|t| *t < -0.004));
    }
}
