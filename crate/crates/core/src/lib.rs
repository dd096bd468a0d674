//! Diffusive molecular-communication channel with a spherical transmitter
//! and a partially absorbing spherical receiver.
//!
//! - [`special`]: erfc (exact and rational approximation) and `Ei`.
//! - [`channel`]: closed-form cumulative reception model and its analytical
//!   impulse response.
//! - [`simulator`]: Brownian-motion particle simulator producing hit curves.
//! - [`pso`]: particle swarm fit of the correction parameters.
//! - [`estimator`]: Poisson maximum-likelihood estimation of distance and
//!   diffusion coefficient, with Fisher information and CRLB.

pub mod channel;
pub mod diff;
pub mod error;
pub mod estimator;
pub mod pso;
pub mod seed;
pub mod simulator;
pub mod special;

pub use channel::{
    ChannelGeometry, ChannelModel, CorrectionParams, CumulativeHitCurve, ErfcKernel, ModelOptions,
    Prefactor,
};
pub use error::{Error, Result};
pub use estimator::{EstimationResult, FisherInfo, ObservationSet, Range, Unknown};
pub use pso::{Bounds, FitResult, PsoConfig};
pub use simulator::{ReflectionMode, ReleaseMode, SimulationConfig};
