//! The enhancement decision process: rollouts, returns, actor-critic losses
//! and the asynchronous actor-learner training loop.

mod calibrate;
mod enhance;
mod loss;
mod returns;
mod rollout;
mod sampling;
mod train;

use thiserror::Error;

use crate::curve::{ActionSpace, CurveError};
use crate::image::ImageError;
use crate::nn::{Architecture, NnError};
use crate::oracle::OracleError;
use crate::reward::{RewardError, RewardWeights};

pub use calibrate::{measure_term_scales, rescale_weights, TermScales};
pub use enhance::{enhance, enhance_trajectory, Policy};
pub use loss::{a3c_losses, a3c_total_loss, accumulate_a3c_gradients, pixel_returns, A3cLosses};
pub use returns::{advantage, discounted_return, returns_backward};
pub use rollout::{rollout_segment, run_episode, RolloutTrace};
pub use sampling::{derive_seed, pixel_uniform, sample_actions, SelectionMode};
pub use train::{strip_wall_time, train, EpisodeSummary, EpochSummary, LogRecord, TrainOutcome, TrainingLog};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("invalid trace: {0}")]
    Trace(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Curve(#[from] CurveError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Image(#[from] ImageError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Enhancement steps per episode.
    pub steps: usize,
    pub gamma: f64,
    pub workers: usize,
    /// Steps rolled out between parameter synchronizations.
    pub t_max: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub action_space: ActionSpace,
    pub reward: RewardWeights,
    pub entropy_beta: f64,
    /// Rescale the reward weights by the term magnitudes of the untrained
    /// policy before training.
    pub calibrate_rewards: bool,
    pub seed: u64,
    /// Global episode budget; `None` runs every epoch to completion.
    pub max_episodes: Option<usize>,
    /// Training images are resized to `resolution x resolution` when set.
    pub resolution: Option<usize>,
    pub trunk: Vec<usize>,
    pub kernel: usize,
    pub head_kernel: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let arch = Architecture::default();
        Self {
            steps: 6,
            gamma: 0.95,
            workers: 4,
            t_max: 6,
            epochs: 10,
            batch_size: 2,
            lr: 1e-4,
            action_space: ActionSpace::ours(),
            reward: RewardWeights::default(),
            entropy_beta: 0.01,
            calibrate_rewards: false,
            seed: 0,
            max_episodes: None,
            resolution: Some(64),
            trunk: arch.trunk,
            kernel: arch.kernel,
            head_kernel: arch.head_kernel,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), AgentError> {
        let bad = |m: String| Err(AgentError::Config(m));
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        if self.t_max == 0 || self.t_max > self.steps {
            return bad(format!("t_max must be in 1..={}, got {}", self.steps, self.t_max));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma must be in (0, 1], got {}", self.gamma));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.entropy_beta.is_finite() && self.entropy_beta >= 0.0) {
            return bad(format!("entropy_beta must be non-negative, got {}", self.entropy_beta));
        }
        if self.resolution == Some(0) {
            return bad("resolution must be at least 1".into());
        }
        self.reward.validate().map_err(AgentError::Config)?;
        self.architecture().validate()?;
        Ok(())
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            trunk: self.trunk.clone(),
            kernel: self.kernel,
            head_kernel: self.head_kernel,
            actions: self.action_space.len(),
        }
    }

    /// Effective settings as ordered key-value pairs, using the config file
    /// key names.
    pub fn echo(&self) -> Vec<(String, String)> {
        let trunk: Vec<String> = self.trunk.iter().map(usize::to_string).collect();
        let r = &self.reward;
        [
            ("steps", self.steps.to_string()),
            ("gamma", self.gamma.to_string()),
            ("workers", self.workers.to_string()),
            ("t_max", self.t_max.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("action_lo", self.action_space.lo().to_string()),
            ("action_hi", self.action_space.hi().to_string()),
            ("action_graduation", self.action_space.graduation().to_string()),
            ("actions", self.action_space.len().to_string()),
            ("w1", r.w1.to_string()),
            ("w2", r.w2.to_string()),
            ("w3", r.w3.to_string()),
            ("lambda", r.lambda.to_string()),
            ("exposure_level", r.exposure_level.to_string()),
            ("block", r.block.to_string()),
            ("entropy_beta", self.entropy_beta.to_string()),
            ("calibrate_rewards", self.calibrate_rewards.to_string()),
            ("seed", self.seed.to_string()),
            (
                "max_episodes",
                self.max_episodes.map_or("none".into(), |v| v.to_string()),
            ),
            ("resolution", self.resolution.map_or("native".into(), |v| v.to_string())),
            ("trunk", trunk.join(",")),
            ("kernel", self.kernel.to_string()),
            ("head_kernel", self.head_kernel.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}
