//! Analytic backpropagation against central finite differences.

use precise_dmi::nn::{
    backward, encode_fids, forward_batch, ArchitectureSpec, GradMode, NetworkParams, Tape,
};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Problem {
    params: NetworkParams<f64>,
    input: Vec<f64>,
    targets: Vec<f64>,
    batch: usize,
}

fn problem(seed: u64) -> Problem {
    let arch = ArchitectureSpec::tiny(64, 4, 2, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = NetworkParams::<f64>::init(arch.clone(), &mut rng).unwrap();
    // random biases and slopes so every branch is exercised
    for slot in arch.layout() {
        if slot.name.ends_with(".bias") || slot.name.ends_with(".slope") {
            for v in &mut params.data_mut()[slot.offset..slot.offset + slot.len] {
                *v = rng.random_range(-0.3..0.3);
            }
        }
    }
    let batch = 3;
    let fids: Vec<Vec<Complex64>> = (0..batch)
        .map(|_| {
            (0..64)
                .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                .collect()
        })
        .collect();
    let input = encode_fids::<f64>(fids.iter().map(|f| f.as_slice()), 64).unwrap();
    let targets = (0..batch * 4).map(|_| rng.random_range(0.0..2.0)).collect();
    Problem {
        params,
        input,
        targets,
        batch,
    }
}

fn loss(p: &Problem, params: &NetworkParams<f64>) -> f64 {
    let mut tape = Tape::new();
    let out = forward_batch(params, &p.input, p.batch, &mut tape).unwrap();
    out.iter()
        .zip(&p.targets)
        .map(|(y, t)| (y - t) * (y - t))
        .sum::<f64>()
        / p.batch as f64
}

fn analytic(p: &Problem, mode: GradMode) -> Vec<f64> {
    let mut tape = Tape::new();
    let out = forward_batch(&p.params, &p.input, p.batch, &mut tape).unwrap().to_vec();
    let d: Vec<f64> = out
        .iter()
        .zip(&p.targets)
        .map(|(y, t)| 2.0 * (y - t) / p.batch as f64)
        .collect();
    let mut g = vec![0.0; p.params.len()];
    backward(&p.params, &mut tape, &d, &mut g, mode).unwrap();
    g
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let p = problem(42);
    let g = analytic(&p, GradMode::Full);
    let h = 1e-4;
    let mut worst: Vec<(String, f64)> = Vec::new();
    for slot in p.params.arch().layout() {
        let mut max_rel: f64 = 0.0;
        for i in slot.offset..slot.offset + slot.len {
            let mut plus = p.params.clone();
            plus.data_mut()[i] += h;
            let mut minus = p.params.clone();
            minus.data_mut()[i] -= h;
            let fd = (loss(&p, &plus) - loss(&p, &minus)) / (2.0 * h);
            let scale = fd.abs().max(g[i].abs());
            if scale > 1e-9 {
                max_rel = max_rel.max((fd - g[i]).abs() / scale);
            }
        }
        worst.push((slot.name.clone(), max_rel));
    }
    for (name, rel) in &worst {
        assert!(*rel < 1e-4, "{name}: relative error {rel:e}");
    }
}

#[test]
fn every_parameter_class_gets_gradient() {
    let p = problem(7);
    let g = analytic(&p, GradMode::Full);
    for slot in p.params.arch().layout() {
        let norm: f64 = g[slot.offset..slot.offset + slot.len].iter().map(|v| v * v).sum();
        assert!(norm > 0.0, "{} has zero gradient", slot.name);
    }
}

#[test]
fn zero_loss_point_has_zero_gradient() {
    let mut p = problem(3);
    let mut tape = Tape::new();
    p.targets = forward_batch(&p.params, &p.input, p.batch, &mut tape).unwrap().to_vec();
    assert!(analytic(&p, GradMode::Full).iter().all(|v| *v == 0.0));
}

#[test]
fn fc_only_leaves_conv_gradients_untouched() {
    let p = problem(5);
    let full = analytic(&p, GradMode::Full);
    let fc = analytic(&p, GradMode::FcOnly);
    let split = p.params.arch().fc_offset();
    assert!(fc[..split].iter().all(|v| *v == 0.0));
    assert_eq!(&fc[split..], &full[split..]);
}
