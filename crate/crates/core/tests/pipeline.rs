//! Fine-tuning and error estimation on a small phantom.

mod common;

use precise_dmi::finetune::{
    dataset_prior, finetune, finetune_cached, maps_from_cache, precise_dmi, run_pipeline, FeatureCache,
    FinetuneConfig, MetaboliteMaps, DEFAULT_OMEGA_MAX,
};
use precise_dmi::metrics::{estimate_invivo_errors, ErrorEstimationConfig, ErrorMode};
use precise_dmi::signal::{default_priors, SpectralGrid};
use precise_dmi::synth::{build_phantom, phantom_to_dmi, DmiDataset, PhantomConfig};

fn small_dataset(seed: u64) -> DmiDataset {
    let ph = build_phantom(&PhantomConfig {
        matrix: [16, 16],
        tumor_size: 1,
        ..PhantomConfig::default()
    })
    .unwrap();
    phantom_to_dmi(&ph, &default_priors(), &SpectralGrid::default(), 12.1, seed).unwrap()
}

fn quick(lambda: f64) -> FinetuneConfig {
    FinetuneConfig {
        epochs: 3,
        ..FinetuneConfig::with_lambda(lambda)
    }
}

fn roughness(maps: &MetaboliteMaps, m: usize) -> f64 {
    let d = maps.dims;
    let mut sum = 0.0;
    let mut n = 0;
    for i in 0..d.len() {
        for j in d.neighbors_face(i) {
            if let (Some(a), Some(b)) = (maps.raw[m][i], maps.raw[m][j]) {
                sum += (a - b).abs();
                n += 1;
            }
        }
    }
    sum / n as f64
}

#[test]
fn zero_lambda_reproduces_single_voxel_maps() {
    let net = common::small_net();
    let ds = small_dataset(1);
    let prior = dataset_prior(&ds, DEFAULT_OMEGA_MAX).unwrap();
    let sve = precise_dmi(&ds, &net).unwrap();
    let tuned = finetune(&ds, &net, &prior, &quick(0.0)).unwrap();
    let after = precise_dmi(&ds, &tuned.params).unwrap();
    assert!(after.max_abs_diff(&sve) < 1e-6);
    let direct = run_pipeline(&ds, &net, &prior, &quick(0.0)).unwrap();
    assert_eq!(direct, sve);
}

#[test]
fn conv_part_is_frozen_and_mask_respected() {
    let net = common::small_net();
    let ds = small_dataset(2);
    let prior = dataset_prior(&ds, DEFAULT_OMEGA_MAX).unwrap();
    let tuned = finetune(&ds, &net, &prior, &quick(0.01)).unwrap();
    assert_eq!(tuned.params.conv_part(), net.conv_part());
    assert_ne!(tuned.params.fc_part(), net.fc_part());
    let maps = precise_dmi(&ds, &tuned.params).unwrap();
    for (i, &m) in ds.mask.iter().enumerate() {
        for k in 0..maps.metabolites() {
            assert_eq!(maps.amplitudes[k][i].is_some(), m);
            assert!(maps.amplitudes[k][i].is_none_or(|a| a >= 0.0));
        }
    }
}

#[test]
fn smoothing_grows_with_lambda() {
    let net = common::small_net();
    let ds = small_dataset(3);
    let prior = dataset_prior(&ds, DEFAULT_OMEGA_MAX).unwrap();
    let cache = FeatureCache::new(&ds, &net).unwrap();
    let mut last = f64::INFINITY;
    for lambda in [0.0, 0.004, 0.01, 0.04] {
        let maps = if lambda == 0.0 {
            maps_from_cache(&cache, &net).unwrap()
        } else {
            let t = finetune_cached(&cache, &net, &prior, &FinetuneConfig::with_lambda(lambda)).unwrap();
            maps_from_cache(&cache, &t.params).unwrap()
        };
        let r = roughness(&maps, 2);
        assert!(r <= last, "lambda {lambda}: roughness {r} after {last}");
        last = r;
    }
}

#[test]
fn estimated_bias_vanishes_without_regularization() {
    let net = common::small_net();
    let ds = small_dataset(4);
    let prior = dataset_prior(&ds, DEFAULT_OMEGA_MAX).unwrap();
    let cfg = ErrorEstimationConfig {
        trials: 3,
        ..ErrorEstimationConfig::default()
    };
    let e = estimate_invivo_errors(&ds, &default_priors(), &net, &prior, &quick(0.0), &cfg).unwrap();
    assert_eq!(e.mode, ErrorMode::Estimated);
    let mut sd_seen = false;
    for m in 1..4 {
        for i in 0..ds.mask.len() {
            if ds.mask[i] && e.bias[m][i].is_some() {
                assert_eq!(e.bias[m][i], Some(0.0));
                sd_seen |= e.sd[m][i].unwrap() > 0.0;
            } else if !ds.mask[i] {
                assert!(e.bias[m][i].is_none() && e.sd[m][i].is_none());
            }
        }
    }
    assert!(sd_seen);
    let bad = ErrorEstimationConfig {
        trials: 1,
        ..cfg
    };
    assert!(estimate_invivo_errors(&ds, &default_priors(), &net, &prior, &quick(0.0), &bad).is_err());
}
