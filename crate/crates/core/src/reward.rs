//! Non-reference step rewards: aesthetic score delta, feature preservation
//! (gray-world color constancy plus action-map smoothness) and exposure
//! control, and their weighted combination.

use thiserror::Error;

use crate::curve::ActionMap;
use crate::image::ImageTensor;
use crate::oracle::{expected_score, AestheticOracle, OracleError};

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("no action maps supplied")]
    NoMaps,
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardWeights {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    /// Smoothness weight inside the feature-preservation term.
    pub lambda: f64,
    /// Well-exposedness level.
    pub exposure_level: f64,
    /// Side of the square exposure blocks, in pixels.
    pub block: usize,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            w1: 1.0,
            w2: 0.1,
            w3: 1.0,
            lambda: 100.0,
            exposure_level: 0.6,
            block: 16,
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<(), String> {
        let fields = [
            ("w1", self.w1),
            ("w2", self.w2),
            ("w3", self.w3),
            ("lambda", self.lambda),
            ("exposure_level", self.exposure_level),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v >= 0.0) {
                return Err(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if self.block == 0 {
            return Err("exposure block size must be at least 1".into());
        }
        Ok(())
    }
}

/// One step's reward terms. `r_total = w1 * r_aes - w2 * r_fea - w3 * r_exp`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RewardBreakdown {
    pub r_aes: f64,
    pub r_fea: f64,
    pub r_exp: f64,
    pub r_total: f64,
    pub score_before: f64,
    pub score_after: f64,
    pub color: f64,
    pub smoothness: f64,
}

pub fn aesthetic_reward(
    oracle: &dyn AestheticOracle,
    s_next: &ImageTensor,
    s_cur: &ImageTensor,
) -> Result<f64, RewardError> {
    let (after, before) = aesthetic_scores(oracle, s_next, s_cur)?;
    Ok(after - before)
}

fn aesthetic_scores(
    oracle: &dyn AestheticOracle,
    s_next: &ImageTensor,
    s_cur: &ImageTensor,
) -> Result<(f64, f64), RewardError> {
    if (s_next.height(), s_next.width()) != (s_cur.height(), s_cur.width()) {
        return Err(RewardError::DimensionMismatch(format!(
            "{}x{} vs {}x{}",
            s_next.height(),
            s_next.width(),
            s_cur.height(),
            s_cur.width()
        )));
    }
    let after = expected_score(&oracle.score(s_next)?);
    let before = expected_score(&oracle.score(s_cur)?);
    Ok((after, before))
}

/// Sum of squared differences between channel means over the pairs
/// (R,G), (R,B), (G,B).
pub fn color_constancy(img: &ImageTensor) -> f64 {
    let [r, g, b] = img.channel_means();
    (r - g).powi(2) + (r - b).powi(2) + (g - b).powi(2)
}

/// Mean absolute horizontal plus mean absolute vertical forward difference of
/// a coefficient map. Differences are taken only between interior neighbor
/// pairs; an axis of length one contributes nothing.
pub fn map_total_variation(map: &ActionMap) -> f64 {
    let (h, w) = (map.height(), map.width());
    let c = map.coefficients();
    let mut horiz = 0.0;
    let mut vert = 0.0;
    for y in 0..h {
        for x in 0..w {
            let v = c[y * w + x];
            if x + 1 < w {
                horiz += (c[y * w + x + 1] - v).abs();
            }
            if y + 1 < h {
                vert += (c[(y + 1) * w + x] - v).abs();
            }
        }
    }
    let mut total = 0.0;
    if w > 1 {
        total += horiz / (h * (w - 1)) as f64;
    }
    if h > 1 {
        total += vert / ((h - 1) * w) as f64;
    }
    total
}

/// Color term plus `lambda / n` times the smoothness of every supplied map.
/// The map is shared by the three channels, so each map's variation counts
/// three times.
pub fn feature_reward(s_next: &ImageTensor, maps: &[ActionMap], lambda: f64, n: usize) -> Result<f64, RewardError> {
    let (color, smooth) = feature_terms(s_next, maps, lambda, n)?;
    Ok(color + smooth)
}

fn feature_terms(s_next: &ImageTensor, maps: &[ActionMap], lambda: f64, n: usize) -> Result<(f64, f64), RewardError> {
    if maps.is_empty() || n == 0 {
        return Err(RewardError::NoMaps);
    }
    if let Some(m) = maps
        .iter()
        .find(|m| (m.height(), m.width()) != (s_next.height(), s_next.width()))
    {
        return Err(RewardError::DimensionMismatch(format!(
            "map {}x{} vs image {}x{}",
            m.height(),
            m.width(),
            s_next.height(),
            s_next.width()
        )));
    }
    let variation: f64 = maps.iter().map(|m| 3.0 * map_total_variation(m)).sum();
    Ok((color_constancy(s_next), lambda * variation / n as f64))
}

/// Mean over non-overlapping `block`×`block` tiles of `|Y_b - E|`, where
/// `Y_b` is the tile's mean luminance. Partial tiles at the right and bottom
/// edges are averaged over their own pixels.
pub fn exposure_reward(s_next: &ImageTensor, level: f64, block: usize) -> f64 {
    assert!(block >= 1, "block size must be positive");
    let (h, w) = (s_next.height(), s_next.width());
    let lum = s_next.luminance();
    let mut total = 0.0;
    let mut blocks = 0usize;
    for by in (0..h).step_by(block) {
        for bx in (0..w).step_by(block) {
            let (ye, xe) = ((by + block).min(h), (bx + block).min(w));
            // Deviations from the first pixel keep uniform blocks exact.
            let pivot = lum[by * w + bx];
            let mut dev = 0.0;
            for y in by..ye {
                dev += lum[y * w + bx..y * w + xe].iter().map(|v| v - pivot).sum::<f64>();
            }
            let mean = pivot + dev / ((ye - by) * (xe - bx)) as f64;
            total += (mean - level).abs();
            blocks += 1;
        }
    }
    total / blocks as f64
}

pub fn combined_reward(weights: &RewardWeights, r_aes: f64, r_fea: f64, r_exp: f64) -> RewardBreakdown {
    RewardBreakdown {
        r_aes,
        r_fea,
        r_exp,
        r_total: weights.w1 * r_aes - weights.w2 * r_fea - weights.w3 * r_exp,
        ..RewardBreakdown::default()
    }
}

/// Full reward for the transition `s_cur -> s_next`, where `maps` holds every
/// action map applied so far in the episode. The smoothness average runs over
/// those maps only, keeping the reward causal.
pub fn step_reward(
    oracle: &dyn AestheticOracle,
    weights: &RewardWeights,
    s_cur: &ImageTensor,
    s_next: &ImageTensor,
    maps: &[ActionMap],
) -> Result<RewardBreakdown, RewardError> {
    let (after, before) = aesthetic_scores(oracle, s_next, s_cur)?;
    let (color, smoothness) = feature_terms(s_next, maps, weights.lambda, maps.len())?;
    let r_exp = exposure_reward(s_next, weights.exposure_level, weights.block);
    Ok(RewardBreakdown {
        score_before: before,
        score_after: after,
        color,
        smoothness,
        ..combined_reward(weights, after - before, color + smoothness, r_exp)
    })
}
