//! Numerical toolkit for the supermarket model under power-of-d-choices routing.
//!
//! The crate is organised around the objects that appear when comparing the
//! finite `M`-server Markov chain with its mean-field limit:
//!
//! * [`model`]: parameters, occupancy/tail/shifted state representations and
//!   the mean-field equilibrium `s*_k = λ^(2^k - 1)`.
//! * [`simulator`]: exact event-driven simulation of the `M`-server chain with
//!   batch-means stationary estimates.
//! * [`meanfield`]: the `n`-level truncated mean-field ODE in tail and shifted
//!   coordinates, integrated with an adaptive Dormand–Prince pair.
//! * [`lyapunov`]: weighted ℓ1 Lyapunov certificates and their numerical
//!   verification along trajectories.
//! * [`perturbation`]: variational (sensitivity) system, second-order Taylor
//!   remainder and the associated bounds.
//! * [`stein`]: the Poisson-equation solution `g`, the chain generator applied
//!   to `g`, and stationary checks of the basic adjoint relation and the
//!   Stein error decomposition.

pub mod error;
pub mod lyapunov;
pub mod meanfield;
pub mod model;
pub mod ode;
pub mod perturbation;
pub mod quadrature;
pub mod simulator;
pub mod stats;
pub mod stein;

pub use error::{Error, Result};
pub use model::{equilibrium, ModelParams, OccupancyState, ShiftedState, TailState};
