//! Per-pixel action selection with a counter-based generator: the draw for a
//! pixel depends only on the seed and the pixel's coordinates, so results do
//! not depend on iteration order or thread count.

use crate::curve::{ActionMap, ActionSpace};
use crate::nn::Tensor;

use super::AgentError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionMode {
    Sample,
    Greedy,
}

#[inline]
pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent seed from a parent seed and a counter.
pub fn derive_seed(seed: u64, counter: u64) -> u64 {
    splitmix64(seed ^ splitmix64(counter))
}

/// Uniform draw in `[0, 1)` for pixel `(y, x)`.
pub fn pixel_uniform(seed: u64, y: usize, x: usize) -> f64 {
    let key = splitmix64(seed ^ splitmix64(((y as u64) << 32) | x as u64));
    (key >> 11) as f64 / (1u64 << 53) as f64
}

/// Chooses one action per pixel from `[H, W, A]` probabilities.
pub fn sample_actions(
    space: &ActionSpace,
    probs: &Tensor,
    mode: SelectionMode,
    seed: u64,
) -> Result<ActionMap, AgentError> {
    let [h, w, a] = match probs.shape() {
        &[h, w, a] => [h, w, a],
        s => return Err(AgentError::Trace(format!("probabilities must be HxWxA, got {s:?}"))),
    };
    if a != space.len() {
        return Err(AgentError::Trace(format!(
            "{a} action probabilities for a space of {}",
            space.len()
        )));
    }
    let mut indices = Vec::with_capacity(h * w);
    for (p, px) in probs.data().chunks_exact(a).enumerate() {
        let choice = match mode {
            SelectionMode::Greedy => argmax(px),
            SelectionMode::Sample => categorical(px, pixel_uniform(seed, p / w, p % w)),
        };
        indices.push(choice as u8);
    }
    Ok(ActionMap::new(space, h, w, indices)?)
}

/// First index of the maximum.
pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Inverse-CDF draw; never selects a zero-probability action.
pub(crate) fn categorical(probs: &[f64], u: f64) -> usize {
    let total: f64 = probs.iter().sum();
    let target = u * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last_positive = i;
            if target < acc {
                return i;
            }
        }
    }
    last_positive
}
