use crate::curve::{apply_pac, ActionMap, ActionSpace};
use crate::image::ImageTensor;
use crate::nn::{forward, Graph, NetworkParams, Tensor};
use crate::oracle::AestheticOracle;
use crate::reward::{step_reward, RewardBreakdown, RewardWeights};

use super::sampling::{derive_seed, sample_actions, SelectionMode};
use super::{AgentError, TrainConfig};

/// States, actions and network outputs recorded over consecutive steps.
/// Per-pixel vectors are row-major `H * W`.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutTrace {
    pub states: Vec<ImageTensor>,
    pub action_maps: Vec<ActionMap>,
    pub log_probs: Vec<Vec<f64>>,
    pub value_maps: Vec<Vec<f64>>,
    pub entropies: Vec<Vec<f64>>,
    pub rewards: Vec<RewardBreakdown>,
    pub gamma: f64,
    /// Value map of the last state when the rollout stopped before the end of
    /// the episode; `None` means the last state is terminal.
    pub bootstrap: Option<Vec<f64>>,
}

impl RolloutTrace {
    pub fn steps(&self) -> usize {
        self.action_maps.len()
    }

    pub fn pixel_count(&self) -> usize {
        self.states.first().map_or(0, ImageTensor::pixel_count)
    }

    pub fn last_state(&self) -> &ImageTensor {
        self.states.last().expect("a trace holds at least one state")
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        let n = self.action_maps.len();
        let bad = |m: String| Err(AgentError::Trace(m));
        if self.states.len() != n + 1 {
            return bad(format!("{} states for {n} steps", self.states.len()));
        }
        for (name, len) in [
            ("log_probs", self.log_probs.len()),
            ("value_maps", self.value_maps.len()),
            ("entropies", self.entropies.len()),
            ("rewards", self.rewards.len()),
        ] {
            if len != n {
                return bad(format!("{len} {name} for {n} steps"));
            }
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma {} outside (0, 1]", self.gamma));
        }
        let (h, w) = (self.states[0].height(), self.states[0].width());
        let p = h * w;
        if self.states.iter().any(|s| s.height() != h || s.width() != w)
            || self.action_maps.iter().any(|m| m.height() != h || m.width() != w)
        {
            return bad("states and maps differ in size".into());
        }
        let per_pixel = self
            .log_probs
            .iter()
            .chain(&self.value_maps)
            .chain(&self.entropies)
            .chain(self.bootstrap.iter());
        for v in per_pixel {
            if v.len() != p {
                return bad(format!("per-pixel record of length {} for {p} pixels", v.len()));
            }
        }
        Ok(())
    }
}

/// Network outputs for one state.
pub(crate) struct Evaluation {
    /// `[A, H, W]`
    pub logits: Tensor,
    /// `[A, H, W]`
    pub log_probs: Tensor,
    pub values: Vec<f64>,
}

pub(crate) fn evaluate(params: &NetworkParams, img: &ImageTensor) -> Result<Evaluation, AgentError> {
    params.check_layout()?;
    let mut g = Graph::new();
    let (logits, value) = forward(&mut g, params, img)?;
    let ls = g.log_softmax_channels(logits)?;
    Ok(Evaluation {
        logits: g.value(logits).clone(),
        log_probs: g.value(ls).clone(),
        values: g.value(value).data().to_vec(),
    })
}

pub(crate) fn select(
    space: &ActionSpace,
    eval: &Evaluation,
    mode: SelectionMode,
    seed: u64,
) -> Result<ActionMap, AgentError> {
    let scores = match mode {
        SelectionMode::Greedy => eval.logits.chw_to_hwc()?,
        SelectionMode::Sample => {
            let probs: Vec<f64> = eval.log_probs.data().iter().map(|v| v.exp()).collect();
            Tensor::new(eval.log_probs.shape().to_vec(), probs)?.chw_to_hwc()?
        }
    };
    sample_actions(space, &scores, mode, seed)
}

/// Chosen-action log-probabilities and per-pixel entropies.
fn step_statistics(log_probs: &Tensor, map: &ActionMap) -> (Vec<f64>, Vec<f64>) {
    let lp = log_probs.data();
    let n = map.indices().len();
    let a = lp.len() / n.max(1);
    let chosen = map
        .indices()
        .iter()
        .enumerate()
        .map(|(p, &i)| lp[i as usize * n + p])
        .collect();
    let entropy = (0..n)
        .map(|p| -(0..a).map(|c| lp[c * n + p].exp() * lp[c * n + p]).sum::<f64>())
        .collect();
    (chosen, entropy)
}

/// Rolls out `len` steps starting at step `t_start` of an episode of
/// `total_steps`. `prior_maps` are the maps already applied in this episode;
/// they feed the causal smoothness term. Step `t` draws with
/// `derive_seed(seed, t)`.
#[allow(clippy::too_many_arguments)]
pub fn rollout_segment(
    params: &NetworkParams,
    space: &ActionSpace,
    oracle: &dyn AestheticOracle,
    weights: &RewardWeights,
    gamma: f64,
    start: &ImageTensor,
    prior_maps: &[ActionMap],
    len: usize,
    total_steps: usize,
    mode: SelectionMode,
    seed: u64,
) -> Result<RolloutTrace, AgentError> {
    let t_start = prior_maps.len();
    if t_start + len > total_steps {
        return Err(AgentError::Trace(format!(
            "steps {t_start}..{} exceed an episode of {total_steps}",
            t_start + len
        )));
    }
    let mut trace = RolloutTrace {
        states: vec![start.clone()],
        action_maps: Vec::with_capacity(len),
        log_probs: Vec::with_capacity(len),
        value_maps: Vec::with_capacity(len),
        entropies: Vec::with_capacity(len),
        rewards: Vec::with_capacity(len),
        gamma,
        bootstrap: None,
    };
    let mut maps: Vec<ActionMap> = prior_maps.to_vec();
    for k in 0..len {
        let t = t_start + k;
        let current = trace.last_state().clone();
        let eval = evaluate(params, &current)?;
        let map = select(space, &eval, mode, derive_seed(seed, t as u64))?;
        let next = apply_pac(&current, &map)?;
        maps.push(map.clone());
        let reward = step_reward(oracle, weights, &current, &next, &maps)?;
        let (chosen, entropy) = step_statistics(&eval.log_probs, &map);
        trace.log_probs.push(chosen);
        trace.entropies.push(entropy);
        trace.value_maps.push(eval.values);
        trace.action_maps.push(map);
        trace.rewards.push(reward);
        trace.states.push(next);
    }
    if t_start + len < total_steps {
        trace.bootstrap = Some(evaluate(params, trace.last_state())?.values);
    }
    Ok(trace)
}

/// One full episode of `config.steps` steps from `s0`.
pub fn run_episode(
    params: &NetworkParams,
    s0: &ImageTensor,
    config: &TrainConfig,
    oracle: &dyn AestheticOracle,
    mode: SelectionMode,
    seed: u64,
) -> Result<RolloutTrace, AgentError> {
    rollout_segment(
        params,
        &config.action_space,
        oracle,
        &config.reward,
        config.gamma,
        s0,
        &[],
        config.steps,
        config.steps,
        mode,
        seed,
    )
}
