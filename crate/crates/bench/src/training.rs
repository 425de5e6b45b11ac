//! Training driver: CSV log plus periodic checkpoints.

use std::path::Path;

use rmha_core::mappo::{LogRow, Trainer};
use rmha_core::policy_net::Model;
use rmha_core::rmha_comm::CommMode;
use serde::{Deserialize, Serialize};

use crate::campaign::to_csv;
use crate::checkpoint;
use crate::config::BenchConfig;
use crate::error::{write_file, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub round: usize,
    pub env_steps: usize,
    pub mean_reward: f64,
    pub recent_sr: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_frac: f64,
    pub blocking_loss: f64,
}

impl From<LogRow> for LogRecord {
    fn from(r: LogRow) -> Self {
        Self {
            round: r.round,
            env_steps: r.env_steps,
            mean_reward: r.mean_reward,
            recent_sr: r.recent_sr,
            policy_loss: r.policy_loss,
            value_loss: r.value_loss,
            entropy: r.entropy,
            clip_frac: r.clip_frac,
            blocking_loss: r.blocking_loss,
        }
    }
}

pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<LogRecord>,
    /// Set when training stopped on a numerical failure; the model then
    /// holds the last good parameters.
    pub error: Option<rmha_core::Error>,
}

/// Trains `variant` and, if `out` is given, writes `log.csv`,
/// `checkpoints/round_NNNNN.ckpt` and `model.ckpt` there. `on_round` sees
/// every log row as it is produced.
pub fn run_training(
    config: &BenchConfig,
    variant: CommMode,
    seed: u64,
    out: Option<&Path>,
    on_round: &mut dyn FnMut(&LogRecord),
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config.train(), config.env()?, config.task()?, config.model(variant), variant, seed)?;
    let every = config.train.checkpoint_every;
    let mut log = Vec::new();
    let mut error = None;
    while !trainer.finished() {
        match trainer.run_round() {
            Ok(row) => {
                let record = LogRecord::from(row);
                on_round(&record);
                log.push(record);
                if let Some(dir) = out {
                    if every > 0 && trainer.round() % every == 0 {
                        checkpoint::save(&dir.join(format!("checkpoints/round_{:05}.ckpt", trainer.round())), &trainer.model)?;
                        write_file(&dir.join("log.csv"), to_csv(&log)?)?;
                    }
                }
            }
            Err(e) => {
                error = Some(e);
                break;
            }
        }
    }
    if let Some(dir) = out {
        write_file(&dir.join("log.csv"), to_csv(&log)?)?;
        checkpoint::save(&dir.join("model.ckpt"), &trainer.model)?;
    }
    Ok(TrainOutcome {
        model: trainer.model,
        log,
        error,
    })
}
