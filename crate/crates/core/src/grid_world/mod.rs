//! Seeded grid-world environment for decentralized multi-agent path finding.
//!
//! Agents move simultaneously on a 4-connected grid. Moves that would leave
//! the map, enter an obstacle, or produce a vertex or swap collision are
//! reverted and penalized, so episodes never end on a collision.

mod env;
mod map;
mod observe;

pub use env::{
    intrinsic_reward, manhattan_matrix, memory_distance, resolve_moves, spawn, AgentOutcome, AgentState, Env, EnvConfig,
    RewardTable, StepOutcome,
};
pub use map::{city_map, generate_map, warehouse_map, Action, Cell, GridMap, Triangular, MAX_MAP_RETRIES, UNREACHABLE};
pub use observe::{Observation, CHANNELS, VEC_LEN};
