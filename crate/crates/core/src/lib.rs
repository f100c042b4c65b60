//! Parameterization-aware diffusion and flow toolkit.
//!
//! Noise schedules, conversions between the eps, x0, v and u prediction
//! targets, forward noising, DDIM/DDPM/Euler samplers, a closed-form Gaussian
//! denoiser, a small controllable-generation trainer and convergence metrics.

pub mod config;
pub mod error;
pub mod forward;
pub mod identities;
pub mod metrics;
pub mod mlp;
pub mod oracle;
pub mod param;
pub mod report;
pub mod sampler;
pub mod schedule;
pub mod toytrainer;

pub use error::{Error, Result};
pub use param::{PredKind, Prediction};
pub use sampler::{Predictor, SamplerConfig};
pub use schedule::Schedule;
