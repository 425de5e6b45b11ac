//! Key-value run configuration (TOML).
//!
//! Every key is optional and defaults to the value in [`BenchConfig::default`].
//! Top-level keys describe the environment; `[train]`, `[model]` and
//! `[campaign]` tables hold the learner, network and evaluation settings.
//!
//! ```toml
//! agents = 8                  # agents per training episode
//! actions = 5                 # fixed; any other value is rejected
//! max_episode_length = 256
//! fov = 3                     # odd field-of-view side
//! world_size = [10, 40]       # training map side range
//! obstacle_prob = [0.0, 0.5]  # triangular density support
//! obstacle_peak = 0.33        # triangular density mode
//! mask_distance = 40          # communication radius (Manhattan)
//! move_cost = -0.3
//! idle_cost = -0.3
//! goal_reward = 0.0
//! collision_cost = -2.0
//! blocking_cost = -1.0
//! eta = 0.1                   # novelty reward scale
//! memory = 8                  # visited-cell buffer length
//!
//! [train]
//! lr = 3e-4
//! total_steps = 200000
//! checkpoint_every = 10       # rounds between checkpoints
//!
//! [model]
//! hidden = 128
//! comm_dim = 64
//!
//! [campaign]
//! sizes = [20]
//! densities = [0.0, 0.15, 0.30]
//! agents = [2, 4, 8, 16]
//! episodes = 100
//! ```

use std::path::Path;

use rmha_core::grid_world::{EnvConfig, RewardTable, Triangular};
use rmha_core::mappo::{TaskConfig, TrainConfig};
use rmha_core::policy_net::{ModelConfig, PolicyConfig};
use rmha_core::rmha_comm::{CommConfig, CommMode};
use serde::{Deserialize, Serialize};

use crate::error::{read_to_string, BenchError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub agents: usize,
    pub actions: usize,
    pub max_episode_length: usize,
    pub fov: usize,
    pub world_size: [usize; 2],
    pub obstacle_prob: [f64; 2],
    pub obstacle_peak: f64,
    pub mask_distance: u32,
    pub move_cost: f64,
    pub idle_cost: f64,
    pub goal_reward: f64,
    pub collision_cost: f64,
    pub blocking_cost: f64,
    pub eta: f64,
    pub memory: usize,
    pub train: TrainSection,
    pub model: ModelSection,
    pub campaign: CampaignSection,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let env = EnvConfig::default();
        Self {
            agents: 8,
            actions: 5,
            max_episode_length: env.max_steps,
            fov: env.fov,
            world_size: [10, 40],
            obstacle_prob: [0.0, 0.5],
            obstacle_peak: 0.33,
            mask_distance: env.comm_radius,
            move_cost: env.rewards.move_cost,
            idle_cost: env.rewards.idle_cost,
            goal_reward: env.rewards.goal,
            collision_cost: env.rewards.collision,
            blocking_cost: env.rewards.blocking,
            eta: env.eta,
            memory: env.memory,
            train: TrainSection::default(),
            model: ModelSection::default(),
            campaign: CampaignSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub gamma: f64,
    pub lambda: f64,
    pub clip: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub lr: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub blocking_coef: f64,
    pub max_grad_norm: f64,
    pub intrinsic_weight: f64,
    pub envs: usize,
    pub horizon: usize,
    pub total_steps: usize,
    pub sr_window: usize,
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            gamma: t.gamma,
            lambda: t.lambda,
            clip: t.clip,
            epochs: t.epochs,
            minibatch: t.minibatch,
            lr: t.lr,
            entropy_coef: t.entropy_coef,
            value_coef: t.value_coef,
            blocking_coef: t.blocking_coef,
            max_grad_norm: t.max_grad_norm,
            intrinsic_weight: t.intrinsic_weight,
            envs: t.envs,
            horizon: t.horizon,
            total_steps: t.total_steps,
            sr_window: t.sr_window,
            checkpoint_every: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub spatial: usize,
    pub scalar: usize,
    pub hidden: usize,
    pub torso: usize,
    pub comm_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub buckets: usize,
    pub ffn_mult: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let p = PolicyConfig::default();
        let c = CommConfig::default();
        Self {
            spatial: p.spatial,
            scalar: p.scalar,
            hidden: p.hidden,
            torso: p.torso,
            comm_dim: c.dim,
            heads: c.heads,
            layers: c.layers,
            buckets: c.buckets,
            ffn_mult: c.ffn_mult,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CampaignSection {
    pub sizes: Vec<usize>,
    pub densities: Vec<f64>,
    pub agents: Vec<usize>,
    pub episodes: usize,
    pub seed_base: u64,
    pub cbs_timeout_ms: u64,
    pub cbs_max_expansions: usize,
}

impl Default for CampaignSection {
    fn default() -> Self {
        Self {
            sizes: vec![20],
            densities: vec![0.0, 0.15, 0.30],
            agents: vec![2, 4, 8, 16],
            episodes: 100,
            seed_base: 0,
            cbs_timeout_ms: 5_000,
            cbs_max_expansions: 200_000,
        }
    }
}

impl BenchConfig {
    /// Two agents on empty 5×5 maps with the small network and the CPU
    /// training preset; `configs/desk.toml` spells the same values out.
    pub fn desk() -> Self {
        let t = TrainConfig::desk();
        let m = ModelConfig::desk(CommMode::Rmha);
        Self {
            agents: 2,
            world_size: [5, 5],
            obstacle_prob: [0.0, 0.0],
            obstacle_peak: 0.0,
            train: TrainSection {
                epochs: t.epochs,
                minibatch: t.minibatch,
                lr: t.lr,
                entropy_coef: t.entropy_coef,
                ..TrainSection::default()
            },
            model: ModelSection {
                spatial: m.policy.spatial,
                scalar: m.policy.scalar,
                hidden: m.policy.hidden,
                torso: m.policy.torso,
                comm_dim: m.comm.dim,
                heads: m.comm.heads,
                layers: m.comm.layers,
                buckets: m.comm.buckets,
                ffn_mult: m.comm.ffn_mult,
            },
            campaign: CampaignSection {
                sizes: vec![5],
                densities: vec![0.0],
                agents: vec![2],
                ..CampaignSection::default()
            },
            ..Self::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_to_string(path)?;
        let config: Self = toml::from_str(&text).map_err(|e| BenchError::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    /// The file at `path` if given, the defaults otherwise.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn validate(&self) -> Result<()> {
        if self.actions != 5 {
            return Err(BenchError::Config(format!("actions must be 5, got {}", self.actions)));
        }
        self.env()?.validate()?;
        self.task()?.validate()?;
        self.train().validate()?;
        self.model(CommMode::Rmha).comm.validate()?;
        Ok(())
    }

    pub fn env(&self) -> Result<EnvConfig> {
        Ok(EnvConfig {
            max_steps: self.max_episode_length,
            fov: self.fov,
            eta: self.eta,
            memory: self.memory,
            comm_radius: self.mask_distance,
            rewards: RewardTable {
                move_cost: self.move_cost,
                idle_cost: self.idle_cost,
                goal: self.goal_reward,
                collision: self.collision_cost,
                blocking: self.blocking_cost,
            },
        })
    }

    pub fn density(&self) -> Result<Triangular> {
        let [lo, hi] = self.obstacle_prob;
        Ok(Triangular::new(lo, self.obstacle_peak.clamp(lo, hi), hi)?)
    }

    pub fn task(&self) -> Result<TaskConfig> {
        Ok(TaskConfig {
            min_side: self.world_size[0],
            max_side: self.world_size[1],
            density: self.density()?,
            agents: self.agents,
        })
    }

    pub fn train(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            gamma: t.gamma,
            lambda: t.lambda,
            clip: t.clip,
            epochs: t.epochs,
            minibatch: t.minibatch,
            lr: t.lr,
            entropy_coef: t.entropy_coef,
            value_coef: t.value_coef,
            blocking_coef: t.blocking_coef,
            max_grad_norm: t.max_grad_norm,
            intrinsic_weight: t.intrinsic_weight,
            envs: t.envs,
            horizon: t.horizon,
            total_steps: t.total_steps,
            sr_window: t.sr_window,
        }
    }

    pub fn model(&self, mode: CommMode) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            policy: PolicyConfig {
                fov: self.fov,
                spatial: m.spatial,
                scalar: m.scalar,
                hidden: m.hidden,
                torso: m.torso,
            },
            comm: CommConfig {
                dim: m.comm_dim,
                heads: m.heads,
                layers: m.layers,
                buckets: m.buckets,
                ffn_mult: m.ffn_mult,
            },
            mode,
            comm_radius: self.mask_distance,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_parameter_table() {
        let c = BenchConfig::default();
        assert_eq!((c.agents, c.actions, c.max_episode_length, c.fov), (8, 5, 256, 3));
        assert_eq!(c.world_size, [10, 40]);
        assert_eq!(c.obstacle_prob, [0.0, 0.5]);
        assert_eq!(c.mask_distance, 40);
        assert_eq!(
            (c.move_cost, c.idle_cost, c.goal_reward, c.collision_cost, c.blocking_cost),
            (-0.3, -0.3, 0.0, -2.0, -1.0)
        );
        c.validate().unwrap();
    }

    #[test]
    fn partial_files_fill_in_defaults() {
        let c: BenchConfig = toml::from_str("agents = 2\n[train]\nlr = 0.001\n").unwrap();
        assert_eq!(c.agents, 2);
        assert_eq!(c.train.lr, 0.001);
        assert_eq!(c.train.gamma, 0.95);
        assert_eq!(c.fov, 3);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<BenchConfig>("agnets = 2\n").is_err());
    }

    #[test]
    fn desk_file_matches_the_preset() {
        let text = include_str!("../../../configs/desk.toml");
        let c: BenchConfig = toml::from_str(text).unwrap();
        assert_eq!(c, BenchConfig::desk());
        c.validate().unwrap();
    }

    #[test]
    fn round_trips_through_text() {
        let c = BenchConfig::default();
        let back: BenchConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }
}
