mod common;

use precise_dmi::baselines::{FourierMode, IntegrationWindows};
use precise_dmi::metrics::{
    bias_sd_maps, fisher_crlb_numeric, monte_carlo, single_line_crlb, AmplitudeEstimator, CnnEstimator,
    FourierEstimator, McConfig, Quantity,
};
use precise_dmi::signal::{default_priors, FidParams, MetabolitePrior, SpectralGrid};
use precise_dmi::space::Dims;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn truth() -> FidParams {
    FidParams::ideal(vec![1.0, 0.35, 0.4, 0.1])
}

#[test]
fn estimator_order_does_not_matter() {
    let priors = default_priors();
    let grid = SpectralGrid::default();
    let net = common::small_net();
    let cfg = McConfig {
        trials: 20,
        levels: vec![7.7, 18.6],
        seed: 9,
        ..McConfig::default()
    };
    let run = |cnn_first: bool| {
        let mut f = FourierEstimator {
            windows: IntegrationWindows::from_priors(&priors, &grid),
            priors: &priors,
        };
        let mut c = CnnEstimator {
            label: "sve".into(),
            params: &net,
        };
        let mut ests: Vec<&mut dyn AmplitudeEstimator> = if cnn_first {
            vec![&mut c, &mut f]
        } else {
            vec![&mut f, &mut c]
        };
        monte_carlo(&truth(), &priors, &grid, &mut ests, &cfg).unwrap()
    };
    let (a, b) = (run(true), run(false));
    for (la, lb) in a.levels.iter().zip(&b.levels) {
        for name in ["sve", "fourier"] {
            let sa = la.stats.iter().find(|s| s.estimator == name).unwrap();
            let sb = lb.stats.iter().find(|s| s.estimator == name).unwrap();
            assert_eq!(sa, sb);
        }
    }
    assert_eq!(run(true), a);
}

#[test]
fn fourier_spread_shrinks_with_snr() {
    let priors = default_priors();
    let grid = SpectralGrid::default();
    let mut f = FourierEstimator {
        windows: IntegrationWindows::from_priors(&priors, &grid),
        priors: &priors,
    };
    let cfg = McConfig {
        trials: 200,
        ..McConfig::default()
    };
    let rep = monte_carlo(&truth(), &priors, &grid, &mut [&mut f], &cfg).unwrap();
    assert_eq!(rep.levels.len(), 14);
    let sds: Vec<f64> = rep.levels.iter().map(|l| l.stats[0].sd_pct(Quantity::Ratio)).collect();
    let violations = sds.windows(2).filter(|w| w[1] > w[0]).count();
    assert!(violations <= 1, "{sds:?}");
    assert!(rep.levels.iter().all(|l| l.stats[0].failures == 0));
}

#[test]
fn real_mode_fourier_is_unbiased_and_near_bound() {
    let priors = default_priors();
    let grid = SpectralGrid::default();
    let mut f = FourierEstimator {
        windows: IntegrationWindows {
            mode: FourierMode::Real,
            ..IntegrationWindows::from_priors(&priors, &grid)
        },
        priors: &priors,
    };
    let cfg = McConfig {
        trials: 400,
        levels: vec![12.1],
        ..McConfig::default()
    };
    let rep = monte_carlo(&truth(), &priors, &grid, &mut [&mut f], &cfg).unwrap();
    let level = &rep.levels[0];
    let bound = fisher_crlb_numeric(&priors, &grid, &truth(), level.sigma).unwrap()[2];
    // no unbiased estimator beats the bound beyond Monte-Carlo slack
    assert!(level.stats[0].amplitude_sd >= 0.9 * bound);
}

fn single(t2: f64, shift: f64) -> Vec<MetabolitePrior> {
    vec![MetabolitePrior::new("line", shift, t2).unwrap()]
}

#[test]
fn numeric_bound_matches_single_line_formula() {
    let grid = SpectralGrid::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let t2 = rng.random_range(0.005..0.1);
        let shift = rng.random_range(1.0..8.0);
        let a = rng.random_range(0.1..2.0);
        let sigma = rng.random_range(0.01..1.0);
        let priors = single(t2, shift);
        let numeric = fisher_crlb_numeric(&priors, &grid, &FidParams::ideal(vec![a]), sigma).unwrap()[0];
        let closed = single_line_crlb(t2, &grid, sigma).unwrap();
        assert!((numeric / closed - 1.0).abs() < 0.01);
        let doubled = fisher_crlb_numeric(&priors, &grid, &FidParams::ideal(vec![a]), 2.0 * sigma).unwrap()[0];
        assert!((doubled / numeric - 2.0).abs() < 1e-12);
    }
}

#[test]
fn bias_and_sd_maps_separate_noise_from_offset() {
    let dims = Dims::plane(4, 4);
    let truth: Vec<Vec<Option<f64>>> = vec![(0..16).map(|i| Some(i as f64)).collect()];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 400;
    let sigma = 0.5;
    let noisy: Vec<_> = (0..n)
        .map(|_| {
            vec![truth[0]
                .iter()
                .map(|t| t.map(|t| t + sigma * rng.sample::<f64, _>(StandardNormal)))
                .collect::<Vec<_>>()]
        })
        .collect();
    let offset: Vec<_> = (0..n)
        .map(|_| vec![truth[0].iter().map(|t| t.map(|t| t + 0.3)).collect::<Vec<_>>()])
        .collect();
    let e = bias_sd_maps(dims, Quantity::Amplitude, &noisy, &truth).unwrap();
    let o = bias_sd_maps(dims, Quantity::Amplitude, &offset, &truth).unwrap();
    for i in 0..16 {
        assert!(e.bias[0][i].unwrap() < 3.0 * sigma / (n as f64).sqrt());
        assert!((e.sd[0][i].unwrap() / sigma - 1.0).abs() < 0.15);
        assert!((o.bias[0][i].unwrap() - 0.3).abs() < 1e-12);
        assert!(o.sd[0][i].unwrap() < 1e-12);
    }
}
