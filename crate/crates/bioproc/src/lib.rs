//! Process-control toolkit for fed-batch bioprocesses.
//!
//! The crate combines the pieces of a model-based control workflow:
//!
//! * [`kinetics`] — a stochastic kinetic simulator for fed-batch fermentation
//!   and downstream purification, used as ground truth and data source;
//! * [`model`] — a time-indexed linear-Gaussian network over states and
//!   actions, with closed-form prediction and policy evaluation;
//! * [`gibbs`] — conjugate Gibbs sampling of the network parameters from
//!   trajectory data;
//! * [`gradient`] / [`optim`] — exact policy gradients via nested
//!   backpropagation and projected stochastic gradient ascent over posterior
//!   draws;
//! * [`shapley`] — closed-form Shapley attribution of inputs at one epoch to
//!   the predicted state at a later epoch.
//!
//! All time indices are zero-based: a horizon of `H` means states `0..H` and
//! transitions (and actions) `0..H-1`.

pub mod error;
pub mod gibbs;
pub mod gradient;
pub mod io;
pub mod kinetics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod shapley;

pub use error::{GibbsError, IoError, KineticsError, ModelError, OptimError, ShapleyError};
pub use model::{ModelParams, PolicyParams, RewardSpec, Trajectory};
