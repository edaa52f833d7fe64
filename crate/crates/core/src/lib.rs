//! Metropolis-adjusted kinetic Langevin sampling (MAKLA), its unadjusted
//! counterpart (UKLA), and coupling-based tools that certify and measure how
//! fast the adjusted chain mixes.
//!
//! The crate is organised bottom-up:
//!
//! - [`model`]: potentials, Hamiltonian, energy-like functional.
//! - [`integrator`]: OU half steps, the θ_h core, UKLA and MAKLA transitions.
//! - [`geometry`]: twisted and untwisted phase-space norms.
//! - [`planner`]: epoch length, horizon, localisation radius and certificates.
//! - [`couplings`]: synchronous coupling, one-shot coupling, epoch runs.
//! - [`diagnostics`]: numerical checks of every bound plus mixing estimates.
//! - [`runner`]: the configuration-driven batch front end behind `kla`.
//!
//! Runnable walkthroughs live in `examples/`; `cargo run --release --example <name>`.

pub mod couplings;
pub mod diagnostics;
pub mod error;
pub mod geometry;
pub mod integrator;
pub mod model;
pub mod planner;
pub mod rng;
pub mod runner;
pub mod stats;

pub use error::{KlaError, Result};
pub use geometry::TwistedNorm;
pub use integrator::{KernelParams, StepOutcome};
pub use model::{PhaseState, TargetModel};
pub use planner::{EpochPlan, StartSpec};
