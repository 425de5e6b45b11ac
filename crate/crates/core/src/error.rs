use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid map: {0}")]
    InvalidMap(String),

    #[error("map generation failed after {retries} attempts: largest free region holds {largest} cells, {needed} required")]
    MapGeneration {
        retries: usize,
        largest: usize,
        needed: usize,
    },

    #[error("cannot spawn {agents} agents: free region has {available} cells, {needed} required")]
    SpawnInfeasible {
        agents: usize,
        available: usize,
        needed: usize,
    },

    #[error("joint action has {got} entries, expected {expected}")]
    JointActionLength { expected: usize, got: usize },

    #[error("action index {0} out of range 0..5")]
    ActionIndex(usize),

    #[error("episode already finished")]
    EpisodeOver,

    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in attention layer {layer}")]
    NonFinite { layer: usize },

    #[error("gradient requested without a cached forward pass")]
    NoForwardCache,

    #[error("sequence length mismatch: {0}")]
    LengthMismatch(&'static str),

    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),

    #[error("non-finite parameters after update in round {round}")]
    NonFiniteParams { round: usize },

    #[error("no path for agent {agent}")]
    Infeasible { agent: usize },
}
