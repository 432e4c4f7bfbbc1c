//! MRI-guided fine-tuning of the estimator head and whole-image map
//! production.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    adam_step, backward, conv_features, encode_fids, head_forward_features, AdamConfig, GradMode,
    NetworkParams, OptimizerState, Tape,
};
use crate::space::Dims;
use crate::synth::{DmiDataset, MriVolume};

pub const DEFAULT_OMEGA_MAX: f64 = 100.0;

/// Water amplitudes at or below this value make a voxel's ratios unreliable.
pub const WATER_FLOOR: f64 = 1e-6;

/// Anatomical prior on the DMI grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialPrior {
    pub dims: Dims,
    /// Rescaled gray level, present exactly on in-mask voxels.
    pub r: Vec<Option<f64>>,
    pub omega_max: f64,
}

/// One centre voxel with its in-mask neighbours. `voxels[0]` is the centre;
/// pairs index into `voxels` and carry their spatial coefficient.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborhoodBatch {
    pub voxels: Vec<usize>,
    pub pairs: Vec<(usize, usize, f64)>,
}

impl SpatialPrior {
    pub fn mask(&self) -> Vec<bool> {
        self.r.iter().map(Option::is_some).collect()
    }

    /// Spatial coefficient of two in-mask voxels.
    pub fn omega(&self, a: usize, b: usize) -> Option<f64> {
        Some(spatial_coeff(self.r[a]?, self.r[b]?, self.omega_max))
    }

    /// Batch centred on `c`: the centre plus its full in-mask neighbourhood,
    /// with one pair per centre-neighbour edge. `None` outside the mask.
    pub fn batch(&self, c: usize) -> Option<NeighborhoodBatch> {
        self.r[c]?;
        let mut voxels = vec![c];
        let mut pairs = Vec::new();
        for n in self.dims.neighbors_full(c) {
            if let Some(w) = self.omega(c, n) {
                pairs.push((0, voxels.len(), w));
                voxels.push(n);
            }
        }
        Some(NeighborhoodBatch { voxels, pairs })
    }
}

/// Edge weight between gray levels: `min(1/(r1-r2)^2, omega_max)`.
pub fn spatial_coeff(r1: f64, r2: f64, omega_max: f64) -> f64 {
    let d2 = (r1 - r2) * (r1 - r2);
    if d2 * omega_max <= 1.0 {
        omega_max
    } else {
        1.0 / d2
    }
}

/// Masks the MRI, block-averages it onto the DMI grid and min-max rescales
/// the in-mask values to [0, 1]. A constant image maps to 0.5 everywhere.
pub fn preprocess_mri(mri: &MriVolume, mask: &[bool], dims: Dims, omega_max: f64) -> Result<SpatialPrior> {
    if mask.len() != dims.len() {
        return Err(Error::shape(dims.len(), mask.len()));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::invalid("ROI mask is empty"));
    }
    if !(omega_max > 0.0) {
        return Err(Error::invalid("omega_max must be positive"));
    }
    let (fx, fy, fz) = mri.ratio_to(dims)?;
    let block = (fx * fy * fz) as f64;
    let mut r: Vec<Option<f64>> = vec![None; dims.len()];
    for (i, slot) in r.iter_mut().enumerate() {
        if !mask[i] {
            continue;
        }
        let (x, y, z) = dims.coords(i);
        let mut acc = 0.0;
        for dz in 0..fz {
            for dy in 0..fy {
                for dx in 0..fx {
                    acc += mri.data[mri.dims.index(x * fx + dx, y * fy + dy, z * fz + dz)];
                }
            }
        }
        *slot = Some(acc / block);
    }
    let (lo, hi) = r
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    let degenerate = !(range > 1e-12 * hi.abs().max(1.0));
    for v in r.iter_mut().flatten() {
        *v = if degenerate { 0.5 } else { (*v - lo) / range };
    }
    Ok(SpatialPrior { dims, r, omega_max })
}

/// Fidelity to the reference outputs plus the weighted neighbour
/// smoothness term, over one batch.
pub fn ep_loss(
    cnn2: &[Vec<f64>],
    cnn1: &[Vec<f64>],
    batch: &NeighborhoodBatch,
    lambda: f64,
) -> Result<f64> {
    if cnn2.len() != batch.voxels.len() || cnn1.len() != batch.voxels.len() {
        return Err(Error::shape(batch.voxels.len(), cnn2.len()));
    }
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let fidelity: f64 = cnn2.iter().zip(cnn1).map(|(a, b)| sq(a, b)).sum();
    let smooth: f64 = batch
        .pairs
        .iter()
        .map(|&(a, b, w)| w * sq(&cnn2[a], &cnn2[b]))
        .sum();
    Ok(fidelity + lambda * smooth)
}

/// Loss of `ep_loss` on flat `[voxel][output]` values with its gradient
/// with respect to `out`.
fn ep_loss_flat(out: &[f32], reference: &[f32], width: usize, batch: &NeighborhoodBatch, lambda: f64, grad: &mut [f32]) -> f64 {
    let mut loss = 0.0;
    for ((g, o), r) in grad.iter_mut().zip(out).zip(reference) {
        let d = (*o - *r) as f64;
        loss += d * d;
        *g = (2.0 * d) as f32;
    }
    if lambda > 0.0 {
        for &(a, b, w) in &batch.pairs {
            for k in 0..width {
                let d = (out[a * width + k] - out[b * width + k]) as f64;
                loss += lambda * w * d * d;
                let gd = (2.0 * lambda * w * d) as f32;
                grad[a * width + k] += gd;
                grad[b * width + k] -= gd;
            }
        }
    }
    loss
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub lambda: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Stop once an epoch improves the summed loss by less than this
    /// fraction; `None` always runs every epoch.
    pub tolerance: Option<f64>,
    /// Visit batches in a fresh seeded random order each epoch instead of
    /// voxel order.
    pub shuffle: bool,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            lambda: 0.01,
            epochs: 10,
            learning_rate: 1e-3,
            tolerance: Some(1e-3),
            shuffle: true,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn with_lambda(lambda: f64) -> Self {
        FinetuneConfig {
            lambda,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::invalid(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.epochs == 0 || !(self.learning_rate > 0.0) || self.tolerance.is_some_and(|t| !(t >= 0.0)) {
            return Err(Error::invalid(
                "epochs and learning rate must be positive, tolerance nonnegative",
            ));
        }
        Ok(())
    }
}

/// Conv features of every in-mask voxel under a fixed conv part.
#[derive(Clone, Debug)]
pub struct FeatureCache {
    pub dims: Dims,
    /// In-mask voxel indices, ascending.
    pub voxels: Vec<usize>,
    /// Position of each voxel in `voxels`, if in mask.
    pub slot: Vec<Option<usize>>,
    pub width: usize,
    pub features: Vec<f32>,
}

impl FeatureCache {
    pub fn new(dataset: &DmiDataset, params: &NetworkParams<f32>) -> Result<Self> {
        dataset.validate()?;
        let arch = params.arch();
        if dataset.grid.n_points != arch.input_len {
            return Err(Error::shape(arch.input_len, dataset.grid.n_points));
        }
        let voxels = dataset.masked();
        let mut slot = vec![None; dataset.voxel_count()];
        for (k, &v) in voxels.iter().enumerate() {
            slot[v] = Some(k);
        }
        let width = arch.flatten_len();
        let mut features = Vec::with_capacity(voxels.len() * width);
        let mut tape = Tape::new();
        for chunk in voxels.chunks(64) {
            let input = encode_fids::<f32>(
                chunk.iter().map(|&v| dataset.fids[v].samples.as_slice()),
                arch.input_len,
            )?;
            features.extend(conv_features(params, &input, chunk.len(), &mut tape)?);
        }
        Ok(FeatureCache {
            dims: dataset.dims,
            voxels,
            slot,
            width,
            features,
        })
    }

    fn row(&self, voxel: usize) -> &[f32] {
        let k = self.slot[voxel].expect("voxel in mask");
        &self.features[k * self.width..(k + 1) * self.width]
    }

    /// Raw head outputs `[in-mask voxel][output]` under `params`.
    pub fn outputs(&self, params: &NetworkParams<f32>) -> Result<Vec<f32>> {
        let mut tape = Tape::new();
        let o = params.arch().outputs;
        let mut out = Vec::with_capacity(self.voxels.len() * o);
        for chunk in self.features.chunks(64 * self.width) {
            let n = chunk.len() / self.width;
            out.extend_from_slice(head_forward_features(params, chunk, n, &mut tape)?);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub params: NetworkParams<f32>,
    /// Summed batch loss of each completed epoch.
    pub epoch_loss: Vec<f64>,
}

/// Fine-tunes the FC head of `cnn1` on a dataset, conv part frozen.
pub fn finetune(
    dataset: &DmiDataset,
    cnn1: &NetworkParams<f32>,
    prior: &SpatialPrior,
    config: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    let cache = FeatureCache::new(dataset, cnn1)?;
    finetune_cached(&cache, cnn1, prior, config)
}

/// [`finetune`] on precomputed features.
pub fn finetune_cached(
    cache: &FeatureCache,
    cnn1: &NetworkParams<f32>,
    prior: &SpatialPrior,
    config: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    config.validate()?;
    if prior.dims != cache.dims {
        return Err(Error::shape(
            format!("{:?}", cache.dims),
            format!("{:?}", prior.dims),
        ));
    }
    if prior.r.iter().zip(&cache.slot).any(|(r, s)| r.is_some() != s.is_some()) {
        return Err(Error::invalid("prior mask differs from dataset mask"));
    }
    let arch = cnn1.arch().clone();
    let o = arch.outputs;
    let reference = cache.outputs(cnn1)?;
    let batches: Vec<NeighborhoodBatch> = cache
        .voxels
        .iter()
        .filter_map(|&c| prior.batch(c))
        .collect();

    let mut cnn2 = cnn1.clone();
    let fc = arch.fc_offset();
    let mut opt = OptimizerState::<f32>::new(
        cnn2.len() - fc,
        AdamConfig {
            learning_rate: config.learning_rate,
            ..AdamConfig::default()
        },
    );
    let mut grads = vec![0f32; cnn2.len()];
    let mut tape = Tape::new();
    let mut feats = Vec::new();
    let mut refs = Vec::new();
    let mut d_out = Vec::new();
    let mut order: Vec<usize> = (0..batches.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut epoch_loss = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        if config.shuffle {
            order.shuffle(&mut rng);
        }
        let mut total = 0.0;
        for &bi in &order {
            let b = &batches[bi];
            feats.clear();
            refs.clear();
            for &v in &b.voxels {
                feats.extend_from_slice(cache.row(v));
                let k = cache.slot[v].unwrap();
                refs.extend_from_slice(&reference[k * o..(k + 1) * o]);
            }
            let n = b.voxels.len();
            let out = head_forward_features(&cnn2, &feats, n, &mut tape)?;
            d_out.resize(n * o, 0.0);
            let loss = ep_loss_flat(out, &refs, o, b, config.lambda, &mut d_out);
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "fine-tuning diverged in epoch {epoch}"
                )));
            }
            total += loss;
            grads[fc..].fill(0.0);
            backward(&cnn2, &mut tape, &d_out, &mut grads, GradMode::FcOnly)?;
            adam_step(&mut opt, cnn2.fc_part_mut(), &grads[fc..])?;
        }
        let prev = epoch_loss.last().copied();
        epoch_loss.push(total);
        if let (Some(prev), Some(tol)) = (prev, config.tolerance) {
            if prev <= 0.0 || (prev - total) / prev < tol {
                break;
            }
        }
    }
    Ok(FinetuneOutcome {
        params: cnn2,
        epoch_loss,
    })
}

/// Per-voxel amplitude and ratio maps. Every map is `[voxel]` with `None`
/// outside the mask.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaboliteMaps {
    pub dims: Dims,
    /// Reported (nonnegative) amplitudes, `[metabolite][voxel]`.
    pub amplitudes: Vec<Vec<Option<f64>>>,
    /// Unclamped network outputs, `[metabolite][voxel]`.
    pub raw: Vec<Vec<Option<f64>>>,
    /// Amplitude over water amplitude, `[metabolite][voxel]`; water itself is
    /// included as 1. `None` where the voxel is unreliable.
    pub ratios: Vec<Vec<Option<f64>>>,
    /// In-mask voxels whose water amplitude is at or below [`WATER_FLOOR`].
    pub unreliable: Vec<bool>,
}

impl MetaboliteMaps {
    /// Assembles maps from raw `[in-mask voxel][output]` values.
    pub fn from_raw(dims: Dims, voxels: &[usize], raw: &[f64], outputs: usize) -> Result<Self> {
        if raw.len() != voxels.len() * outputs || outputs == 0 {
            return Err(Error::shape(voxels.len() * outputs, raw.len()));
        }
        let n = dims.len();
        let mut maps = MetaboliteMaps {
            dims,
            amplitudes: vec![vec![None; n]; outputs],
            raw: vec![vec![None; n]; outputs],
            ratios: vec![vec![None; n]; outputs],
            unreliable: vec![false; n],
        };
        for (k, &v) in voxels.iter().enumerate() {
            let row = &raw[k * outputs..(k + 1) * outputs];
            let water = row[0].max(0.0);
            let reliable = water > WATER_FLOOR;
            maps.unreliable[v] = !reliable;
            for m in 0..outputs {
                let a = row[m].max(0.0);
                maps.raw[m][v] = Some(row[m]);
                maps.amplitudes[m][v] = Some(a);
                maps.ratios[m][v] = reliable.then(|| a / water);
            }
        }
        Ok(maps)
    }

    pub fn metabolites(&self) -> usize {
        self.amplitudes.len()
    }

    /// Largest absolute difference between two sets of raw maps over
    /// voxels present in both.
    pub fn max_abs_diff(&self, other: &MetaboliteMaps) -> f64 {
        self.raw
            .iter()
            .zip(&other.raw)
            .flat_map(|(a, b)| a.iter().zip(b))
            .filter_map(|(a, b)| Some((a.as_ref()? - b.as_ref()?).abs()))
            .fold(0.0, f64::max)
    }
}

/// Maps from a feature cache under `params`.
pub fn maps_from_cache(cache: &FeatureCache, params: &NetworkParams<f32>) -> Result<MetaboliteMaps> {
    let out: Vec<f64> = cache.outputs(params)?.iter().map(|&v| v as f64).collect();
    MetaboliteMaps::from_raw(cache.dims, &cache.voxels, &out, params.arch().outputs)
}

/// Applies a (fine-tuned) network to every in-mask voxel.
pub fn precise_dmi(dataset: &DmiDataset, cnn2: &NetworkParams<f32>) -> Result<MetaboliteMaps> {
    let cache = FeatureCache::new(dataset, cnn2)?;
    maps_from_cache(&cache, cnn2)
}

/// Full pipeline: SVE maps at `lambda = 0`, otherwise fine-tune then map.
pub fn run_pipeline(
    dataset: &DmiDataset,
    cnn1: &NetworkParams<f32>,
    prior: &SpatialPrior,
    config: &FinetuneConfig,
) -> Result<MetaboliteMaps> {
    let cache = FeatureCache::new(dataset, cnn1)?;
    if config.lambda == 0.0 {
        return maps_from_cache(&cache, cnn1);
    }
    let tuned = finetune_cached(&cache, cnn1, prior, config)?;
    maps_from_cache(&cache, &tuned.params)
}

/// Spatial prior from a dataset's own MRI and mask.
pub fn dataset_prior(dataset: &DmiDataset, omega_max: f64) -> Result<SpatialPrior> {
    let mri = dataset
        .mri
        .as_ref()
        .ok_or_else(|| Error::invalid("dataset has no MRI"))?;
    preprocess_mri(mri, &dataset.mask, dataset.dims, omega_max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spatial_coeff_examples() {
        assert_eq!(spatial_coeff(0.3, 0.3, 100.0), 100.0);
        assert_eq!(spatial_coeff(0.0, 1.0, 100.0), 1.0);
        assert_eq!(spatial_coeff(0.0, 1.0, 0.5), 0.5);
        assert!((spatial_coeff(0.5, 0.6, 1000.0) - 100.0).abs() < 1e-9);
    }

    fn block_mri(gray: &[f64], dims: Dims, f: usize) -> MriVolume {
        let md = Dims::plane(dims.nx * f, dims.ny * f);
        let data = (0..md.len())
            .map(|j| {
                let (x, y, _) = md.coords(j);
                gray[dims.index(x / f, y / f, 0)]
            })
            .collect();
        MriVolume::new(md, data).unwrap()
    }

    #[test]
    fn constant_mri_maps_to_half() {
        let dims = Dims::plane(4, 4);
        let mri = block_mri(&[0.7; 16], dims, 5);
        let p = preprocess_mri(&mri, &[true; 16], dims, 100.0).unwrap();
        assert!(p.r.iter().all(|r| *r == Some(0.5)));
    }

    #[test]
    fn block_average_and_rescale() {
        let dims = Dims::plane(2, 1);
        let md = Dims::plane(10, 5);
        // left block averages 0.2, right block 0.6
        let data = (0..md.len())
            .map(|j| {
                let (x, y, _) = md.coords(j);
                if x < 5 {
                    if y == 0 { 1.0 } else { 0.0 }
                } else {
                    0.6
                }
            })
            .collect();
        let mri = MriVolume::new(md, data).unwrap();
        let p = preprocess_mri(&mri, &[true, true], dims, 100.0).unwrap();
        assert_eq!(p.r, vec![Some(0.0), Some(1.0)]);
    }

    #[test]
    fn masked_voxels_carry_nothing() {
        let dims = Dims::plane(3, 3);
        let gray: Vec<f64> = (0..9).map(|i| i as f64 / 8.0).collect();
        let mri = block_mri(&gray, dims, 2);
        let mut mask = vec![true; 9];
        mask[4] = false;
        let p = preprocess_mri(&mri, &mask, dims, 100.0).unwrap();
        assert_eq!(p.r[4], None);
        assert!(p.batch(4).is_none());
        let b = p.batch(0).unwrap();
        assert_eq!(b.voxels, vec![0, 1, 3]);
        assert!(b.pairs.iter().all(|&(_, j, _)| b.voxels[j] != 4));
    }

    #[test]
    fn rejects_bad_inputs() {
        let dims = Dims::plane(3, 3);
        let mri = block_mri(&[0.0; 9], dims, 2);
        assert!(preprocess_mri(&mri, &[false; 9], dims, 100.0).is_err());
        let odd = MriVolume::new(Dims::plane(7, 6), vec![0.0; 42]).unwrap();
        assert!(preprocess_mri(&odd, &[true; 9], dims, 100.0).is_err());
    }

    #[test]
    fn ep_loss_examples() {
        let batch = NeighborhoodBatch {
            voxels: vec![0, 1, 2],
            pairs: vec![(0, 1, 3.0), (0, 2, 5.0)],
        };
        let c1 = vec![vec![1.0, 2.0], vec![0.5, 0.0], vec![2.0, 2.0]];
        assert_eq!(ep_loss(&c1, &c1, &batch, 0.0).unwrap(), 0.0);
        let flat = vec![vec![0.3, 0.4]; 3];
        let fid = ep_loss(&flat, &c1, &batch, 0.0).unwrap();
        assert_eq!(ep_loss(&flat, &c1, &batch, 2.0).unwrap(), fid);

        let c2 = vec![vec![1.0, 1.0], vec![0.0, 1.0], vec![2.0, 3.0]];
        let base = ep_loss(&c2, &c1, &batch, 0.0).unwrap();
        let one = ep_loss(&c2, &c1, &batch, 1.0).unwrap() - base;
        let doubled = NeighborhoodBatch {
            pairs: batch.pairs.iter().map(|&(a, b, w)| (a, b, 2.0 * w)).collect(),
            ..batch.clone()
        };
        let two = ep_loss(&c2, &c1, &doubled, 1.0).unwrap() - base;
        assert!((two - 2.0 * one).abs() < 1e-12);
        // 3*(1+0) + 5*(1+4)
        assert!((one - 28.0).abs() < 1e-12);
    }

    #[test]
    fn flat_loss_gradient_matches_differences() {
        let batch = NeighborhoodBatch {
            voxels: vec![0, 1, 2],
            pairs: vec![(0, 1, 3.0), (0, 2, 0.5)],
        };
        let out = vec![0.1f32, 0.9, -0.3, 0.4, 0.2, 0.0];
        let refs = vec![0.0f32, 1.0, 0.0, 0.5, 0.5, 0.5];
        let mut g = vec![0f32; 6];
        ep_loss_flat(&out, &refs, 2, &batch, 0.2, &mut g);
        let h = 1e-3f32;
        let mut scratch = vec![0f32; 6];
        for k in 0..6 {
            let mut p = out.clone();
            p[k] += h;
            let lp = ep_loss_flat(&p, &refs, 2, &batch, 0.2, &mut scratch);
            p[k] -= 2.0 * h;
            let lm = ep_loss_flat(&p, &refs, 2, &batch, 0.2, &mut scratch);
            let fd = (lp - lm) / (2.0 * h as f64);
            assert!((fd - g[k] as f64).abs() < 1e-3, "{k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn unreliable_water_gives_no_ratio() {
        let dims = Dims::plane(3, 1);
        let raw = vec![1.0, 0.5, -0.2, 0.1];
        let maps = MetaboliteMaps::from_raw(dims, &[0, 2], &raw, 2).unwrap();
        assert_eq!(maps.amplitudes[0][1], None);
        assert_eq!(maps.ratios[1][0], Some(0.5));
        assert!(maps.unreliable[2]);
        assert_eq!(maps.ratios[1][2], None);
        assert_eq!(maps.amplitudes[0][2], Some(0.0));
        assert_eq!(maps.raw[0][2], Some(-0.2));
    }
}
