use crate::image::ImageTensor;
use crate::nn::NetworkParams;
use crate::oracle::AestheticOracle;
use crate::reward::RewardWeights;

use super::rollout::run_episode;
use super::sampling::{derive_seed, SelectionMode};
use super::{AgentError, TrainConfig};

const CALIBRATION_STREAM: u64 = 0x4341_4c49;

/// Mean magnitudes of the raw reward terms over one epoch of the untrained
/// policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TermScales {
    pub aes: f64,
    pub fea: f64,
    pub exp: f64,
}

pub fn measure_term_scales(
    config: &TrainConfig,
    images: &[ImageTensor],
    oracle: &dyn AestheticOracle,
) -> Result<TermScales, AgentError> {
    if images.is_empty() {
        return Err(AgentError::EmptyDataset);
    }
    let params = NetworkParams::init(config.architecture(), config.seed)?;
    let (mut aes, mut fea, mut exp, mut count) = (0.0, 0.0, 0.0, 0usize);
    for (i, img) in images.iter().enumerate() {
        let seed = derive_seed(config.seed ^ CALIBRATION_STREAM, i as u64);
        let trace = run_episode(&params, img, config, oracle, SelectionMode::Sample, seed)?;
        for r in &trace.rewards {
            aes += r.r_aes.abs();
            fea += r.r_fea;
            exp += r.r_exp;
            count += 1;
        }
    }
    let k = count.max(1) as f64;
    Ok(TermScales {
        aes: aes / k,
        fea: fea / k,
        exp: exp / k,
    })
}

/// Divides each weight by its term's mean magnitude, so a weight of 1 gives
/// that term unit average size. Terms that never fire keep their weight.
pub fn rescale_weights(weights: &RewardWeights, scales: &TermScales) -> RewardWeights {
    let adjust = |w: f64, s: f64| if s > 1e-12 { w / s } else { w };
    RewardWeights {
        w1: adjust(weights.w1, scales.aes),
        w2: adjust(weights.w2, scales.fea),
        w3: adjust(weights.w3, scales.exp),
        ..weights.clone()
    }
}
