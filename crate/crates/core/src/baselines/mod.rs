//! Comparison methods: Fourier peak integration, nonlinear spectral fitting
//! and anisotropic diffusion of metabolite maps.

mod diffusion;
mod fit;
mod fourier;

pub use diffusion::{anisotropic_diffusion, DiffusionConfig};
pub(crate) use fit::model_jacobian;
pub use fit::{model_fid, spectral_fit, FitConfig, FitResult};
pub use fourier::{fourier_amplitudes, FourierMode, IntegrationWindows};
