use std::path::Path;

use precise_dmi::baselines::{DiffusionConfig, FitConfig, IntegrationWindows};
use precise_dmi::finetune::{FinetuneConfig, DEFAULT_OMEGA_MAX};
use precise_dmi::metrics::{ErrorEstimationConfig, McConfig};
use precise_dmi::synth::PhantomConfig;
use precise_dmi::{ArchitectureSpec, SpectralGrid, TrainConfig, TrainingSampleSpec};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Monte-Carlo sweep settings beyond the single-voxel core config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MonteCarloSection {
    #[serde(flatten)]
    pub mc: McConfig,
    /// Phantom realizations per level for the fine-tuned estimator; 0 skips it.
    pub precise_realizations: usize,
    pub include_fit: bool,
}

impl Default for MonteCarloSection {
    fn default() -> Self {
        MonteCarloSection {
            mc: McConfig::default(),
            precise_realizations: 2,
            include_fit: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrlbSection {
    /// Water SNR levels; sigma is calibrated on each amplitude set.
    pub snr: Vec<f64>,
    /// Water, Glc, Glx, Lac; defaults to the phantom compartments.
    pub amplitudes: Option<Vec<[f64; 4]>>,
}

impl Default for CrlbSection {
    fn default() -> Self {
        CrlbSection {
            snr: vec![7.7, 12.1, 18.6],
            amplitudes: None,
        }
    }
}

/// Every tunable of every command. Each command reads the blocks it needs and
/// records the whole resolved value in its manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub grid: SpectralGrid,
    pub architecture: ArchitectureSpec,
    pub train: TrainConfig,
    /// Sampling ranges; derived from the priors and grid when absent.
    pub training_spec: Option<TrainingSampleSpec>,
    pub phantom: PhantomConfig,
    pub snr: f64,
    pub finetune: FinetuneConfig,
    pub omega_max: f64,
    /// Global amplitude factor applied to datasets before estimation.
    pub calibration: Option<f64>,
    /// Fourier windows; derived from the priors when absent.
    pub windows: Option<IntegrationWindows>,
    pub fit: FitConfig,
    pub diffusion: DiffusionConfig,
    pub montecarlo: MonteCarloSection,
    pub crlb: CrlbSection,
    pub errormap: ErrorEstimationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            grid: SpectralGrid::default(),
            architecture: ArchitectureSpec::default(),
            train: TrainConfig::default(),
            training_spec: None,
            phantom: PhantomConfig::default(),
            snr: 12.1,
            finetune: FinetuneConfig::default(),
            omega_max: DEFAULT_OMEGA_MAX,
            calibration: None,
            windows: None,
            fit: FitConfig::default(),
            diffusion: DiffusionConfig::default(),
            montecarlo: MonteCarloSection::default(),
            crlb: CrlbSection::default(),
            errormap: ErrorEstimationConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("bad config {}: {e}", path.display())))
    }

    /// Pushes the run seed into every block that draws random numbers.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
        self.finetune.seed = seed;
        self.montecarlo.mc.seed = seed;
        self.errormap.seed = seed;
    }
}
