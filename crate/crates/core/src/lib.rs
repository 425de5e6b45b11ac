//! Multi-agent path finding on grid worlds with distance-aware attention
//! communication.
//!
//! The crate is `no_std` (it needs `alloc`) and contains only the pure
//! algorithmic pieces:
//!
//! * [`grid_world`]: a seeded, deterministic decentralized grid world with
//!   simultaneous moves, collision reversion, observations and rewards.
//! * [`rmha_comm`]: the relation-enhanced multi-head attention block that
//!   mixes per-agent messages using embedded Manhattan distances.
//! * [`policy_net`]: the per-agent encoder, recurrent cell and output heads.
//! * [`mappo`]: rollouts, GAE, clipped PPO and value-based conflict resolution.
//! * [`baselines`]: space-time A*, cooperative A* and conflict-based search.
//! * [`gradcheck`]: central finite-difference checks of every analytic gradient.
//!
//! File formats, campaigns and the command line live in the `rmha-bench` crate.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod baselines;
pub mod gradcheck;
pub mod grid_world;
pub mod mappo;
pub mod nn;
pub mod param;
pub mod policy_net;
pub mod rmha_comm;

mod error;
pub use error::{Error, Result};

pub use grid_world::{Action, Cell, Env, EnvConfig, GridMap, Observation};
pub use param::ParamGraph;
