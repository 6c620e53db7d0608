//! Flat `key = value` run configuration shared by every command. Values from
//! a file are applied first, then command-line overrides; unknown keys are
//! rejected and the merged result is validated before any work starts.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use thiserror::Error;

use crate::agent::TrainConfig;
use crate::curve::ActionSpace;
use crate::oracle::{OracleConfig, OracleKind};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value `{value}` for `{key}`: {message}")]
    Value {
        key: String,
        value: String,
        message: String,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionSpaceChoice {
    Ours,
    Baseline,
    Custom,
}

impl FromStr for ActionSpaceChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ours" => Ok(Self::Ours),
            "baseline" => Ok(Self::Baseline),
            "custom" => Ok(Self::Custom),
            _ => Err("expected ours, baseline or custom".into()),
        }
    }
}

impl fmt::Display for ActionSpaceChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Ours => "ours",
            Self::Baseline => "baseline",
            Self::Custom => "custom",
        })
    }
}

/// Every setting a command may need. Build with [`RunConfig::builder`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub oracle: OracleConfig,
    pub action_space: ActionSpaceChoice,
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Greedy steps for `enhance`; defaults to the training step count.
    pub enhance_steps: usize,
    pub metrics_psnr: bool,
    pub metrics_ssim: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        Self {
            enhance_steps: train.steps,
            train,
            oracle: OracleConfig::default(),
            action_space: ActionSpaceChoice::Ours,
            dataset: None,
            checkpoint: None,
            out: None,
            metrics_psnr: true,
            metrics_ssim: true,
        }
    }
}

/// Splits config text into `(key, value)` pairs. Blank lines and lines
/// starting with `#` are skipped.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: i + 1,
            message: format!("expected key = value, got `{line}`"),
        })?;
        let key = k.trim();
        if key.is_empty() {
            return Err(ConfigError::Syntax {
                line: i + 1,
                message: "empty key".into(),
            });
        }
        out.push((key.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Accumulates settings, then resolves and validates them.
#[derive(Debug, Clone, Default)]
pub struct RunConfigBuilder {
    pairs: Vec<(String, String)>,
}

impl RunConfig {
    pub fn builder() -> RunConfigBuilder {
        RunConfigBuilder::default()
    }

    /// The settings in config file syntax; parsing it back reproduces `self`.
    pub fn to_config_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.pairs() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    /// Settings as `(key, value)` pairs in config file syntax.
    pub fn pairs(&self) -> Vec<(String, String)> {
        let t = &self.train;
        let r = &t.reward;
        let p = &self.oracle.proxy;
        let join = |v: &[String]| v.join(",");
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let mut out: Vec<(&str, String)> = vec![
            ("steps", t.steps.to_string()),
            ("gamma", t.gamma.to_string()),
            ("workers", t.workers.to_string()),
            ("t_max", t.t_max.to_string()),
            ("epochs", t.epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("lr", t.lr.to_string()),
            ("entropy_beta", t.entropy_beta.to_string()),
            ("calibrate_rewards", t.calibrate_rewards.to_string()),
            ("seed", t.seed.to_string()),
            ("max_episodes", t.max_episodes.map_or("none".into(), |v| v.to_string())),
            ("resolution", t.resolution.map_or("native".into(), |v| v.to_string())),
            ("trunk", join(&t.trunk.iter().map(usize::to_string).collect::<Vec<_>>())),
            ("kernel", t.kernel.to_string()),
            ("head_kernel", t.head_kernel.to_string()),
            ("action_space", self.action_space.to_string()),
        ];
        if self.action_space == ActionSpaceChoice::Custom {
            out.push(("action_lo", t.action_space.lo().to_string()));
            out.push(("action_hi", t.action_space.hi().to_string()));
            out.push(("action_graduation", t.action_space.graduation().to_string()));
        }
        out.extend([
            ("w1", r.w1.to_string()),
            ("w2", r.w2.to_string()),
            ("w3", r.w3.to_string()),
            ("lambda", r.lambda.to_string()),
            ("exposure_level", r.exposure_level.to_string()),
            ("block", r.block.to_string()),
            (
                "oracle",
                match self.oracle.kind {
                    OracleKind::Proxy => "proxy".into(),
                    OracleKind::External => "external".into(),
                },
            ),
            ("oracle_timeout_secs", self.oracle.timeout.as_secs_f64().to_string()),
            ("proxy_target_luminance", p.target_luminance.to_string()),
            ("proxy_contrast_scale", p.contrast_scale.to_string()),
            ("proxy_saturation_scale", p.saturation_scale.to_string()),
            ("proxy_clip_low", p.clip_low.to_string()),
            ("proxy_clip_high", p.clip_high.to_string()),
            ("proxy_rating_spread", p.rating_spread.to_string()),
            (
                "proxy_weights",
                join(&p.weights.iter().map(f64::to_string).collect::<Vec<_>>()),
            ),
            ("enhance_steps", self.enhance_steps.to_string()),
            ("metrics_psnr", self.metrics_psnr.to_string()),
            ("metrics_ssim", self.metrics_ssim.to_string()),
        ]);
        let optional = [
            ("oracle_command", self.oracle.command.clone()),
            ("dataset", path(&self.dataset)),
            ("checkpoint", path(&self.checkpoint)),
            ("out", path(&self.out)),
        ];
        for (k, v) in optional {
            if let Some(v) = v {
                out.push((k, v));
            }
        }
        out.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.oracle
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.enhance_steps == 0 {
            return Err(ConfigError::Invalid("enhance_steps must be at least 1".into()));
        }
        Ok(())
    }
}

fn value_error(key: &str, value: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Value {
        key: key.into(),
        value: value.into(),
        message: message.into(),
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e: T::Err| value_error(key, value, e.to_string()))
}

fn parse_optional(key: &str, value: &str, none: &str) -> Result<Option<usize>, ConfigError> {
    if value == none {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: fmt::Display,
{
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

impl RunConfigBuilder {
    /// Adds the pairs of a config file.
    pub fn file(mut self, path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        self.pairs.extend(parse_pairs(&text)?);
        Ok(self)
    }

    pub fn text(mut self, text: &str) -> Result<Self, ConfigError> {
        self.pairs.extend(parse_pairs(text)?);
        Ok(self)
    }

    /// Adds one setting; later settings win.
    pub fn set(mut self, key: &str, value: impl Into<String>) -> Self {
        self.pairs.push((key.to_string(), value.into()));
        self
    }

    pub fn build(self) -> Result<RunConfig, ConfigError> {
        let mut c = RunConfig::default();
        let mut t_max: Option<usize> = None;
        let mut enhance_steps: Option<usize> = None;
        let mut custom: [Option<f64>; 3] = [None; 3];
        let mut timeout_secs: Option<f64> = None;
        for (key, value) in &self.pairs {
            let (k, v) = (key.as_str(), value.as_str());
            let t = &mut c.train;
            let r = &mut t.reward;
            let p = &mut c.oracle.proxy;
            match k {
                "steps" => t.steps = parse(k, v)?,
                "gamma" => t.gamma = parse(k, v)?,
                "workers" => t.workers = parse(k, v)?,
                "t_max" => t_max = Some(parse(k, v)?),
                "epochs" => t.epochs = parse(k, v)?,
                "batch_size" => t.batch_size = parse(k, v)?,
                "lr" => t.lr = parse(k, v)?,
                "entropy_beta" => t.entropy_beta = parse(k, v)?,
                "calibrate_rewards" => t.calibrate_rewards = parse(k, v)?,
                "seed" => t.seed = parse(k, v)?,
                "max_episodes" => t.max_episodes = parse_optional(k, v, "none")?,
                "resolution" => t.resolution = parse_optional(k, v, "native")?,
                "trunk" => t.trunk = parse_list(k, v)?,
                "kernel" => t.kernel = parse(k, v)?,
                "head_kernel" => t.head_kernel = parse(k, v)?,
                "action_space" => c.action_space = parse(k, v)?,
                "action_lo" => custom[0] = Some(parse(k, v)?),
                "action_hi" => custom[1] = Some(parse(k, v)?),
                "action_graduation" => custom[2] = Some(parse(k, v)?),
                "w1" => r.w1 = parse(k, v)?,
                "w2" => r.w2 = parse(k, v)?,
                "w3" => r.w3 = parse(k, v)?,
                "lambda" => r.lambda = parse(k, v)?,
                "exposure_level" => r.exposure_level = parse(k, v)?,
                "block" => r.block = parse(k, v)?,
                "oracle" => {
                    c.oracle.kind = match v {
                        "proxy" => OracleKind::Proxy,
                        "external" => OracleKind::External,
                        _ => return Err(value_error(k, v, "expected proxy or external")),
                    }
                }
                "oracle_command" => c.oracle.command = Some(v.to_string()),
                "oracle_timeout_secs" => timeout_secs = Some(parse(k, v)?),
                "proxy_target_luminance" => p.target_luminance = parse(k, v)?,
                "proxy_contrast_scale" => p.contrast_scale = parse(k, v)?,
                "proxy_saturation_scale" => p.saturation_scale = parse(k, v)?,
                "proxy_clip_low" => p.clip_low = parse(k, v)?,
                "proxy_clip_high" => p.clip_high = parse(k, v)?,
                "proxy_rating_spread" => p.rating_spread = parse(k, v)?,
                "proxy_weights" => {
                    let w: Vec<f64> = parse_list(k, v)?;
                    p.weights = w
                        .try_into()
                        .map_err(|_| value_error(k, v, "expected four comma-separated weights"))?;
                }
                "dataset" => c.dataset = Some(PathBuf::from(v)),
                "checkpoint" => c.checkpoint = Some(PathBuf::from(v)),
                "out" => c.out = Some(PathBuf::from(v)),
                "enhance_steps" => enhance_steps = Some(parse(k, v)?),
                "metrics_psnr" => c.metrics_psnr = parse(k, v)?,
                "metrics_ssim" => c.metrics_ssim = parse(k, v)?,
                _ => return Err(ConfigError::UnknownKey(key.clone())),
            }
        }
        c.train.t_max = t_max.unwrap_or(c.train.steps);
        c.enhance_steps = enhance_steps.unwrap_or(c.train.steps);
        if let Some(s) = timeout_secs {
            c.oracle.timeout = Duration::try_from_secs_f64(s)
                .ok()
                .filter(|d| !d.is_zero())
                .ok_or_else(|| value_error("oracle_timeout_secs", &s.to_string(), "expected a positive duration"))?;
        }
        c.train.action_space = match c.action_space {
            ActionSpaceChoice::Ours | ActionSpaceChoice::Baseline if custom.iter().any(Option::is_some) => {
                return Err(ConfigError::Invalid(
                    "action_lo, action_hi and action_graduation need action_space = custom".into(),
                ))
            }
            ActionSpaceChoice::Ours => ActionSpace::ours(),
            ActionSpaceChoice::Baseline => ActionSpace::baseline(),
            ActionSpaceChoice::Custom => {
                let [Some(lo), Some(hi), Some(g)] = custom else {
                    return Err(ConfigError::Invalid(
                        "action_space = custom needs action_lo, action_hi and action_graduation".into(),
                    ));
                };
                ActionSpace::new(lo, hi, g).map_err(|e| ConfigError::Invalid(e.to_string()))?
            }
        };
        c.validate()?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_build() {
        let c = RunConfig::builder().build().unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.train.t_max, 6);
        assert_eq!(c.enhance_steps, 6);
    }

    #[test]
    fn parses_file_text_with_comments() {
        let text = "# training\nsteps = 4\n\nlr=0.001\ntrunk = 3, 8, 8\naction_space = baseline\nmax_episodes = 10\n";
        let c = RunConfig::builder().text(text).unwrap().build().unwrap();
        assert_eq!(c.train.steps, 4);
        assert_eq!(c.train.t_max, 4);
        assert_eq!(c.enhance_steps, 4);
        assert_eq!(c.train.lr, 0.001);
        assert_eq!(c.train.trunk, vec![3, 8, 8]);
        assert_eq!(c.train.action_space.len(), 27);
        assert_eq!(c.train.max_episodes, Some(10));
    }

    #[test]
    fn later_settings_override() {
        let c = RunConfig::builder()
            .text("seed = 1\nworkers = 4")
            .unwrap()
            .set("seed", "7")
            .set("workers", "1")
            .build()
            .unwrap();
        assert_eq!((c.train.seed, c.train.workers), (7, 1));
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        assert!(matches!(
            RunConfig::builder().set("stepz", "3").build(),
            Err(ConfigError::UnknownKey(k)) if k == "stepz"
        ));
        assert!(matches!(
            RunConfig::builder().text("steps 3"),
            Err(ConfigError::Syntax { line: 1, .. })
        ));
        assert!(matches!(
            RunConfig::builder().set("gamma", "high").build(),
            Err(ConfigError::Value { .. })
        ));
        assert!(matches!(
            RunConfig::builder().set("gamma", "1.5").build(),
            Err(ConfigError::Invalid(_))
        ));
        assert!(RunConfig::builder().set("oracle", "external").build().is_err());
        assert!(RunConfig::builder().set("action_lo", "-0.2").build().is_err());
        assert!(RunConfig::builder().set("action_space", "custom").build().is_err());
        assert!(RunConfig::builder().set("proxy_weights", "0.5,0.5").build().is_err());
        assert!(RunConfig::builder().set("oracle_timeout_secs", "0").build().is_err());
    }

    #[test]
    fn custom_action_space() {
        let c = RunConfig::builder()
            .set("action_space", "custom")
            .set("action_lo", "-0.5")
            .set("action_hi", "1")
            .set("action_graduation", "0.25")
            .build()
            .unwrap();
        assert_eq!(c.train.action_space.len(), 7);
        assert_eq!(c.train.architecture().actions, 7);
    }

    #[test]
    fn text_round_trips() {
        let c = RunConfig::builder()
            .set("action_space", "custom")
            .set("action_lo", "-0.3")
            .set("action_hi", "0.9")
            .set("action_graduation", "0.1")
            .set("oracle", "external")
            .set("oracle_command", "python3 score.py --fast")
            .set("dataset", "data/synth")
            .set("t_max", "3")
            .set("resolution", "native")
            .set("w2", "0.05")
            .set("calibrate_rewards", "true")
            .build()
            .unwrap();
        let again = RunConfig::builder().text(&c.to_config_text()).unwrap().build().unwrap();
        assert_eq!(again, c);
        let default_again = RunConfig::builder()
            .text(&RunConfig::default().to_config_text())
            .unwrap()
            .build()
            .unwrap();
        assert_eq!(default_again, RunConfig::default());
    }
}
