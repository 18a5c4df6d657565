//! GC-DT: digital-twin voltage control on radial distribution feeders.
//!
//! The library is organized bottom-up:
//! - [`feeder`]: grid topology and backward/forward-sweep power flow.
//! - [`env`]: the finite-horizon volt-var control MDP over a feeder.
//! - [`nncore`]: dense networks, analytic gradients, losses, SGD.
//! - [`twin`]: the three-model world model (transform / dynamic / predict)
//!   with projection heads and the consistency-regularized unrolled loss.
//! - [`planner`]: Gumbel top-m + sequential-halving search and a PUCT
//!   baseline over the learned model.
//! - [`trainer`]: self-play, replay, targets, and the training loop.

pub mod env;
pub mod feeder;
pub mod nncore;
pub mod planner;
pub mod trainer;
pub mod twin;
