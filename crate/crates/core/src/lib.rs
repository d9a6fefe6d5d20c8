//! Safe adaptive model-based RL toolkit.
//!
//! The pieces, bottom up:
//! - [`autodiff`]: minimal reverse-mode tape, Adam, checkpoints.
//! - [`nn`]: MLP layers with a training (tape) path and an inference path.
//! - [`anp`]: attentive-neural-process disturbance model over context sets.
//! - [`dynamics`]: composite transition model = prior model + disturbance
//!   residual model.
//! - [`envs`]: non-stationary constrained environments (cart-pole swingup,
//!   planar feeding proxy).
//! - [`planner`]: risk-averse constrained CEM-MPC with particle trajectory
//!   sampling and CVaR scoring.
//! - [`replay`]: episodic replay buffer with prioritized context/target
//!   sampling.

pub mod anp;
pub mod autodiff;
pub mod dynamics;
pub mod envs;
pub mod error;
pub mod linalg;
pub mod nn;
pub mod planner;
pub mod replay;
pub mod rng;

pub use error::{CoreError, Result};
