use crate::nn::{forward, Graph, NetworkParams, Tensor, Var};

use super::rollout::RolloutTrace;
use super::AgentError;

/// Loss terms averaged over steps and pixels.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct A3cLosses {
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    /// `policy + 0.5 * value - beta * entropy`
    pub total: f64,
}

impl A3cLosses {
    fn combine(policy: f64, value: f64, entropy: f64, beta: f64) -> Self {
        Self {
            policy,
            value,
            entropy,
            total: policy + 0.5 * value - beta * entropy,
        }
    }
}

/// Per-step, per-pixel returns. The scalar step reward is shared by every
/// pixel; only the bootstrap differs between pixels.
pub fn pixel_returns(trace: &RolloutTrace) -> Result<Vec<Vec<f64>>, AgentError> {
    trace.validate()?;
    let n = trace.steps();
    let p = trace.pixel_count();
    let mut acc = trace.bootstrap.clone().unwrap_or_else(|| vec![0.0; p]);
    let mut out = vec![Vec::new(); n];
    for t in (0..n).rev() {
        let r = trace.rewards[t].r_total;
        for v in &mut acc {
            *v = r + trace.gamma * *v;
        }
        out[t] = acc.clone();
    }
    Ok(out)
}

/// Loss terms from the recorded network outputs of a trace.
pub fn a3c_losses(trace: &RolloutTrace, beta: f64) -> Result<A3cLosses, AgentError> {
    let returns = pixel_returns(trace)?;
    let count = (trace.steps() * trace.pixel_count()) as f64;
    if count == 0.0 {
        return Err(AgentError::Trace("trace has no steps".into()));
    }
    let (mut policy, mut value, mut entropy) = (0.0, 0.0, 0.0);
    for t in 0..trace.steps() {
        for p in 0..trace.pixel_count() {
            let g = returns[t][p] - trace.value_maps[t][p];
            policy -= trace.log_probs[t][p] * g;
            value += g * g;
            entropy += trace.entropies[t][p];
        }
    }
    Ok(A3cLosses::combine(policy / count, value / count, entropy / count, beta))
}

struct LossGraph {
    graph: Graph,
    total: Var,
    losses: A3cLosses,
}

/// Builds the loss for step `t` of `trace` on `params`, with the advantage
/// taken from the recorded value map so that it is constant under
/// differentiation.
fn step_graph(
    params: &NetworkParams,
    trace: &RolloutTrace,
    t: usize,
    returns: &[f64],
    beta: f64,
    norm: f64,
) -> Result<LossGraph, AgentError> {
    let state = &trace.states[t];
    let (h, w) = (state.height(), state.width());
    let mut g = Graph::new();
    let (logits, value) = forward(&mut g, params, state)?;
    let ls = g.log_softmax_channels(logits)?;
    let indices = trace.action_maps[t].indices().iter().map(|&i| i as usize).collect();
    let chosen = g.gather_channels(ls, indices)?;
    let neg_adv: Vec<f64> = returns.iter().zip(&trace.value_maps[t]).map(|(r, v)| v - r).collect();
    let neg_adv = g.constant(Tensor::new(vec![h, w], neg_adv)?);
    let weighted = g.mul(chosen, neg_adv)?;
    let policy = g.sum(weighted);

    let target = g.constant(Tensor::new(vec![1, h, w], returns.to_vec())?);
    let diff = g.sub(target, value)?;
    let sq = g.square(diff);
    let value_sq = g.sum(sq);

    let probs = g.exp(ls);
    let plogp = g.mul(probs, ls)?;
    let neg_entropy = g.sum(plogp);

    let a = g.scale(policy, norm);
    let b = g.scale(value_sq, 0.5 * norm);
    let c = g.scale(neg_entropy, beta * norm);
    let ab = g.add(a, b)?;
    let total = g.add(ab, c)?;
    let losses = A3cLosses::combine(
        g.value(policy).item() * norm,
        g.value(value_sq).item() * norm,
        -g.value(neg_entropy).item() * norm,
        beta,
    );
    Ok(LossGraph {
        graph: g,
        total,
        losses,
    })
}

fn for_each_step(
    params: &NetworkParams,
    trace: &RolloutTrace,
    beta: f64,
    mut visit: impl FnMut(LossGraph) -> Result<(), AgentError>,
) -> Result<(), AgentError> {
    params.check_layout()?;
    let returns = pixel_returns(trace)?;
    let count = trace.steps() * trace.pixel_count();
    if count == 0 {
        return Err(AgentError::Trace("trace has no steps".into()));
    }
    let norm = 1.0 / count as f64;
    for (t, ret) in returns.iter().enumerate() {
        visit(step_graph(params, trace, t, ret, beta, norm)?)?;
    }
    Ok(())
}

fn add(a: A3cLosses, b: A3cLosses) -> A3cLosses {
    A3cLosses {
        policy: a.policy + b.policy,
        value: a.value + b.value,
        entropy: a.entropy + b.entropy,
        total: a.total + b.total,
    }
}

/// Total loss of `trace` re-evaluated on `params`.
pub fn a3c_total_loss(params: &NetworkParams, trace: &RolloutTrace, beta: f64) -> Result<f64, AgentError> {
    let mut total = 0.0;
    for_each_step(params, trace, beta, |lg| {
        total += lg.graph.value(lg.total).item();
        Ok(())
    })?;
    Ok(total)
}

/// Adds `weight` times the gradient of the total loss into `params` and
/// returns the unweighted loss terms.
pub fn accumulate_a3c_gradients(
    params: &mut NetworkParams,
    trace: &RolloutTrace,
    beta: f64,
    weight: f64,
) -> Result<A3cLosses, AgentError> {
    let snapshot = params.clone();
    let mut losses = A3cLosses::default();
    for_each_step(&snapshot, trace, beta, |mut lg| {
        let scaled = lg.graph.scale(lg.total, weight);
        lg.graph.backward(scaled, params)?;
        losses = add(losses, lg.losses);
        Ok(())
    })?;
    Ok(losses)
}
