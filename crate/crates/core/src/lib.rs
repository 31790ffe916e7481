//! Particle gradient flows augmented with birth-death dynamics.
//!
//! The crate is organised around a particle [`Ensemble`] evolving in a
//! [`Potential`] landscape `V(θ) = F(θ) + ∫K(θ,θ′)dμ(θ′)`. Time-stepping
//! schemes are trait objects looked up by name in a [`SchemeRegistry`], so
//! experiment configs and the CLI select them at runtime. The [`meanfield`]
//! module supplies deterministic reference solutions (closed forms and a 1D
//! finite-volume solver) against which the particle system is checked, and
//! [`diagnostics`] turns trajectories into comparable numbers.

pub mod diagnostics;
pub mod dynamics;
pub mod ensemble;
pub mod error;
pub mod harness;
pub mod meanfield;
pub mod potentials;
pub mod rng;

pub use dynamics::{DynamicsConfig, RateTransform, Scheme, SchemeRegistry, StepReport};
pub use ensemble::{Dist1, Ensemble, ParticleState, Sampler};
pub use error::{Error, Result};
pub use potentials::{Gradient, ModelSpec, Potential};
pub use rng::SimRng;
