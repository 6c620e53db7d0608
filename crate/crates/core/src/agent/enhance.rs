use crate::curve::{apply_pac, ActionMap, ActionSpace};
use crate::image::ImageTensor;
use crate::nn::{Checkpoint, NetworkParams, NnError};

use super::rollout::{evaluate, select};
use super::sampling::SelectionMode;
use super::AgentError;

/// A trained network paired with the action space its policy head indexes.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    params: NetworkParams,
    space: ActionSpace,
}

impl Policy {
    pub fn new(params: NetworkParams, space: ActionSpace) -> Result<Self, AgentError> {
        params.check_layout()?;
        let actions = params.architecture().actions;
        if actions != space.len() {
            return Err(NnError::Architecture(format!(
                "policy head has {actions} actions but the action space has {}",
                space.len()
            ))
            .into());
        }
        Ok(Self { params, space })
    }

    /// Rebuilds the policy from a checkpoint written by training, which
    /// records the action space in its metadata.
    pub fn from_checkpoint(checkpoint: &Checkpoint) -> Result<Self, AgentError> {
        let field = |key: &str| -> Result<f64, AgentError> {
            let raw = checkpoint
                .meta_value(key)
                .ok_or_else(|| NnError::Checkpoint(format!("missing metadata key {key}")))?;
            raw.parse()
                .map_err(|_| NnError::Checkpoint(format!("metadata {key}={raw} is not a number")).into())
        };
        let space = ActionSpace::new(field("action_lo")?, field("action_hi")?, field("action_graduation")?)?;
        Self::new(checkpoint.params.clone(), space)
    }

    pub fn params(&self) -> &NetworkParams {
        &self.params
    }

    pub fn space(&self) -> &ActionSpace {
        &self.space
    }
}

/// Greedy rollout of `steps` steps, returning `s^1..s^steps` and the maps
/// that produced them.
pub fn enhance_trajectory(
    policy: &Policy,
    img: &ImageTensor,
    steps: usize,
) -> Result<(Vec<ImageTensor>, Vec<ActionMap>), AgentError> {
    if steps == 0 {
        return Err(AgentError::Config("enhancement needs at least one step".into()));
    }
    let mut states = Vec::with_capacity(steps);
    let mut maps = Vec::with_capacity(steps);
    let mut current = img.clone();
    for _ in 0..steps {
        let eval = evaluate(&policy.params, &current)?;
        let map = select(&policy.space, &eval, SelectionMode::Greedy, 0)?;
        current = apply_pac(&current, &map)?;
        states.push(current.clone());
        maps.push(map);
    }
    Ok((states, maps))
}

/// Greedy enhancement with the policy stored in `checkpoint`.
pub fn enhance(checkpoint: &Checkpoint, img: &ImageTensor, steps: usize) -> Result<Vec<ImageTensor>, AgentError> {
    let policy = Policy::from_checkpoint(checkpoint)?;
    Ok(enhance_trajectory(&policy, img, steps)?.0)
}
