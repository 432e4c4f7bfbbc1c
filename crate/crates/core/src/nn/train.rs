use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamConfig, OptimizerState};
use super::arch::ArchitectureSpec;
use super::network::{backward, encode_fids, forward_batch, mse_flat, GradMode, Tape};
use super::params::NetworkParams;
use crate::error::{Error, Result};
use crate::signal::{MetabolitePrior, SpectralGrid};
use crate::synth::{sample_training_pair, TrainingSampleSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    /// Learning rate reached at the last iteration by cosine decay; equal to
    /// `learning_rate` for a constant rate.
    pub final_learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// Desk-scale schedule: 5000 iterations of 128 fresh samples.
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            iterations: 5000,
            learning_rate: 1e-3,
            final_learning_rate: 1e-3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Full schedule, 25000 x 128 = 3.2 million samples.
    pub fn full() -> Self {
        TrainConfig {
            iterations: 25_000,
            ..Self::default()
        }
    }

    /// Learning rate used at zero-based iteration `it`.
    pub fn learning_rate_at(&self, it: usize) -> f64 {
        if self.iterations < 2 {
            return self.learning_rate;
        }
        let frac = it as f64 / (self.iterations - 1) as f64;
        let c = 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
        self.final_learning_rate + (self.learning_rate - self.final_learning_rate) * c
    }

    pub fn total_samples(&self) -> usize {
        self.batch_size * self.iterations
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0
            || self.iterations == 0
            || !(self.learning_rate > 0.0)
            || !(self.final_learning_rate > 0.0)
        {
            return Err(Error::invalid(
                "batch size, iterations and learning rate must be positive",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub iteration: usize,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: NetworkParams<f32>,
    pub loss_curve: Vec<LossPoint>,
}

/// Trains the single-voxel estimator on a stream of freshly sampled pairs.
///
/// Every iteration draws a new batch, so there is no fixed dataset and no
/// epochs. Weights and data use separate ChaCha streams of `config.seed`;
/// the result is bit-identical for a given seed. `progress` is called after
/// each iteration with the batch loss.
pub fn train_sve(
    spec: &TrainingSampleSpec,
    priors: &[MetabolitePrior],
    grid: &SpectralGrid,
    arch: &ArchitectureSpec,
    config: &TrainConfig,
    mut progress: Option<&mut dyn FnMut(usize, f64)>,
) -> Result<TrainOutcome> {
    spec.validate(priors)?;
    config.validate()?;
    arch.validate()?;
    if arch.outputs != priors.len() || arch.input_len != grid.n_points {
        return Err(Error::shape(
            format!("{} outputs over {} points", priors.len(), grid.n_points),
            format!("{} outputs over {} points", arch.outputs, arch.input_len),
        ));
    }

    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut data_rng = ChaCha8Rng::seed_from_u64(config.seed);
    data_rng.set_stream(1);

    let mut params = NetworkParams::<f32>::init(arch.clone(), &mut init_rng)?;
    let mut opt = OptimizerState::new(
        params.len(),
        AdamConfig {
            learning_rate: config.learning_rate,
            ..AdamConfig::default()
        },
    );
    let mut tape = Tape::new();
    let mut grads = vec![0f32; params.len()];
    let mut targets = vec![0f32; config.batch_size * arch.outputs];
    let mut d_out = vec![0f32; config.batch_size * arch.outputs];
    let mut loss_curve = Vec::with_capacity(config.iterations);

    for it in 0..config.iterations {
        let pairs: Vec<_> = (0..config.batch_size)
            .map(|_| sample_training_pair(spec, priors, grid, &mut data_rng))
            .collect();
        for (row, (_, amps)) in targets.chunks_mut(arch.outputs).zip(&pairs) {
            for (t, a) in row.iter_mut().zip(amps) {
                *t = *a as f32;
            }
        }
        let input = encode_fids::<f32>(
            pairs.iter().map(|(f, _)| f.samples.as_slice()),
            arch.input_len,
        )?;
        let out = forward_batch(&params, &input, config.batch_size, &mut tape)?;
        let loss = mse_flat(out, &targets, arch.outputs, Some(&mut d_out))?;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!(
                "training diverged at iteration {it}: loss {loss}"
            )));
        }
        grads.fill(0.0);
        backward(&params, &mut tape, &d_out, &mut grads, GradMode::Full)?;
        opt.config.learning_rate = config.learning_rate_at(it);
        adam_step(&mut opt, params.data_mut(), &grads)?;
        loss_curve.push(LossPoint {
            iteration: it + 1,
            loss,
        });
        if let Some(cb) = progress.as_mut() {
            cb(it + 1, loss);
        }
    }
    Ok(TrainOutcome { params, loss_curve })
}
