//! Aesthetic scoring: rating distributions over scores 1..=10.
//!
//! The training loop treats the scorer as a frozen black box. Two scorers are
//! provided: a deterministic closed-form proxy built from exposure, contrast,
//! saturation and clipping statistics, and an external process speaking a
//! line protocol, so that a real aesthetic model can be plugged in.
//!
//! External protocol: the child reads one image path per line on stdin and
//! answers each with one line of ten whitespace-separated probabilities for
//! ratings 1 through 10.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::time::Duration;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::image::{save_image, ImageTensor};

pub const NUM_RATINGS: usize = 10;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("invalid rating distribution: {0}")]
    InvalidDistribution(String),
    #[error("invalid oracle config: {0}")]
    Config(String),
    #[error("external scorer failed to start: {0}")]
    Spawn(String),
    #[error("external scorer failed: {message}; raw output: {raw:?}")]
    External { message: String, raw: String },
    #[error("external scorer timed out after {0:?}")]
    Timeout(Duration),
}

/// Probabilities for ratings 1..=10; `probs()[k]` is the probability of
/// rating `k + 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatingDistribution {
    probs: [f64; NUM_RATINGS],
}

impl RatingDistribution {
    pub fn new(probs: [f64; NUM_RATINGS]) -> Result<Self, OracleError> {
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(OracleError::InvalidDistribution(format!(
                "entries must be finite and non-negative: {probs:?}"
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(OracleError::InvalidDistribution(format!("sums to {sum}")));
        }
        Ok(Self { probs })
    }

    /// Normalizes non-negative weights into a distribution.
    pub fn from_weights(weights: [f64; NUM_RATINGS]) -> Result<Self, OracleError> {
        let sum: f64 = weights.iter().sum();
        if !(sum.is_finite() && sum > 0.0) || weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(OracleError::InvalidDistribution(format!(
                "cannot normalize {weights:?}"
            )));
        }
        Self::new(weights.map(|w| w / sum))
    }

    pub fn one_hot(rating: usize) -> Self {
        assert!((1..=NUM_RATINGS).contains(&rating), "rating must be in 1..=10");
        let mut probs = [0.0; NUM_RATINGS];
        probs[rating - 1] = 1.0;
        Self { probs }
    }

    pub fn uniform() -> Self {
        Self {
            probs: [1.0 / NUM_RATINGS as f64; NUM_RATINGS],
        }
    }

    pub fn probs(&self) -> &[f64; NUM_RATINGS] {
        &self.probs
    }
}

/// `sum k * P_k` over ratings 1..=10.
pub fn expected_score(d: &RatingDistribution) -> f64 {
    d.probs.iter().enumerate().map(|(k, p)| (k + 1) as f64 * p).sum()
}

pub const AMOS_WEIGHTS: [f64; 4] = [0.288, 0.288, 0.082, 0.342];

/// Aesthetic mean opinion score: weighted sum of light/color, composition,
/// imaging quality and semantic attribute scores.
pub fn amos_score(f1: f64, f2: f64, f3: f64, f4: f64) -> f64 {
    AMOS_WEIGHTS[0] * f1 + AMOS_WEIGHTS[1] * f2 + AMOS_WEIGHTS[2] * f3 + AMOS_WEIGHTS[3] * f4
}

pub trait AestheticOracle: Send + Sync {
    fn score(&self, img: &ImageTensor) -> Result<RatingDistribution, OracleError>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProxyParams {
    pub target_luminance: f64,
    pub contrast_scale: f64,
    pub saturation_scale: f64,
    pub clip_low: f64,
    pub clip_high: f64,
    pub rating_spread: f64,
    /// Exposure, contrast, saturation, clipping.
    pub weights: [f64; 4],
}

impl Default for ProxyParams {
    fn default() -> Self {
        Self {
            target_luminance: 0.55,
            contrast_scale: 0.18,
            saturation_scale: 0.3,
            clip_low: 0.02,
            clip_high: 0.98,
            rating_spread: 1.5,
            weights: [0.4, 0.3, 0.15, 0.15],
        }
    }
}

impl ProxyParams {
    pub fn validate(&self) -> Result<(), OracleError> {
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.weights.iter().any(|w| *w < 0.0) {
            return Err(OracleError::Config(format!(
                "proxy weights must be non-negative and sum to 1, got {:?}",
                self.weights
            )));
        }
        if !(self.rating_spread > 0.0) {
            return Err(OracleError::Config("rating spread must be positive".into()));
        }
        if !(self.contrast_scale > 0.0 && self.saturation_scale > 0.0) {
            return Err(OracleError::Config("proxy scales must be positive".into()));
        }
        if !(self.target_luminance > 0.0 && self.target_luminance < 1.0) {
            return Err(OracleError::Config("target luminance must lie in (0, 1)".into()));
        }
        if !(self.clip_low < self.clip_high) {
            return Err(OracleError::Config("clip thresholds out of order".into()));
        }
        Ok(())
    }
}

/// Image statistics feeding the proxy score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProxyStats {
    pub luminance_mean: f64,
    pub luminance_std: f64,
    pub saturation: f64,
    pub clip_fraction: f64,
}

impl ProxyStats {
    pub fn measure(img: &ImageTensor, params: &ProxyParams) -> Self {
        let n = img.pixel_count() as f64;
        let lum = img.luminance();
        let mean = lum.iter().sum::<f64>() / n;
        let var = lum.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;
        let mut sat = 0.0;
        let mut clipped = 0usize;
        for p in img.pixels() {
            let hi = p[0].max(p[1]).max(p[2]);
            let lo = p[0].min(p[1]).min(p[2]);
            sat += hi - lo;
            if p.iter().any(|&v| v < params.clip_low || v > params.clip_high) {
                clipped += 1;
            }
        }
        Self {
            luminance_mean: mean,
            luminance_std: var.sqrt(),
            saturation: sat / n,
            clip_fraction: clipped as f64 / n,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ProxyScorer {
    params: ProxyParams,
}

impl ProxyScorer {
    pub fn new(params: ProxyParams) -> Result<Self, OracleError> {
        params.validate()?;
        Ok(Self { params })
    }

    pub fn params(&self) -> &ProxyParams {
        &self.params
    }

    /// Quality in `[0, 1]` for the given statistics.
    pub fn quality(&self, stats: &ProxyStats) -> f64 {
        let p = &self.params;
        let span = 1.0 - p.target_luminance;
        let exposure = (1.0 - (stats.luminance_mean - p.target_luminance).abs() / span).max(0.0);
        let contrast = (stats.luminance_std / p.contrast_scale).min(1.0);
        let saturation = (stats.saturation / p.saturation_scale).min(1.0);
        let unclipped = 1.0 - stats.clip_fraction;
        p.weights[0] * exposure + p.weights[1] * contrast + p.weights[2] * saturation + p.weights[3] * unclipped
    }

    /// Gaussian rating profile centred on `1 + 9q`.
    pub fn distribution(&self, quality: f64) -> RatingDistribution {
        let mean = 1.0 + 9.0 * quality;
        let two_var = 2.0 * self.params.rating_spread * self.params.rating_spread;
        let weights: [f64; NUM_RATINGS] = std::array::from_fn(|k| (-((k + 1) as f64 - mean).powi(2) / two_var).exp());
        RatingDistribution::from_weights(weights).expect("gaussian weights are positive")
    }
}

impl AestheticOracle for ProxyScorer {
    fn score(&self, img: &ImageTensor) -> Result<RatingDistribution, OracleError> {
        let stats = ProxyStats::measure(img, &self.params);
        Ok(self.distribution(self.quality(&stats)))
    }
}

pub const EXTERNAL_TIMEOUT: Duration = Duration::from_secs(30);

struct ExternalProcess {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
}

/// A child process answering one rating line per image path.
pub struct ExternalScorer {
    process: Mutex<ExternalProcess>,
    timeout: Duration,
    scratch: PathBuf,
    counter: AtomicU64,
}

impl ExternalScorer {
    /// Starts `command` through the shell.
    pub fn spawn(command: &str, timeout: Duration) -> Result<Self, OracleError> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| OracleError::Spawn(format!("{command}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        let scratch = std::env::temp_dir().join(format!("pixrl-oracle-{}", std::process::id()));
        std::fs::create_dir_all(&scratch).map_err(|e| OracleError::Spawn(e.to_string()))?;
        Ok(Self {
            process: Mutex::new(ExternalProcess {
                child,
                stdin,
                lines: rx,
            }),
            timeout,
            scratch,
            counter: AtomicU64::new(0),
        })
    }

    /// Parses one response line of ten probabilities.
    pub fn parse_response(line: &str) -> Result<RatingDistribution, OracleError> {
        let malformed = |message: String| OracleError::External {
            message,
            raw: line.to_string(),
        };
        let values: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| malformed(format!("unparsable number: {e}")))?;
        let probs: [f64; NUM_RATINGS] = values
            .try_into()
            .map_err(|v: Vec<f64>| malformed(format!("expected 10 values, got {}", v.len())))?;
        RatingDistribution::from_weights(probs).map_err(|e| malformed(e.to_string()))
    }
}

impl AestheticOracle for ExternalScorer {
    fn score(&self, img: &ImageTensor) -> Result<RatingDistribution, OracleError> {
        let id = self.counter.fetch_add(1, Ordering::Relaxed);
        let path = self.scratch.join(format!("request-{id}.png"));
        save_image(img, &path).map_err(|e| OracleError::External {
            message: format!("cannot stage image: {e}"),
            raw: String::new(),
        })?;
        let mut proc = self.process.lock().unwrap_or_else(|p| p.into_inner());
        let sent = writeln!(proc.stdin, "{}", path.display()).and_then(|_| proc.stdin.flush());
        let result = match sent {
            Err(e) => Err(OracleError::External {
                message: format!("cannot write request: {e}"),
                raw: String::new(),
            }),
            Ok(()) => match proc.lines.recv_timeout(self.timeout) {
                Ok(Ok(line)) => Self::parse_response(&line),
                Ok(Err(e)) => Err(OracleError::External {
                    message: format!("cannot read response: {e}"),
                    raw: String::new(),
                }),
                Err(RecvTimeoutError::Timeout) => Err(OracleError::Timeout(self.timeout)),
                Err(RecvTimeoutError::Disconnected) => {
                    let status = proc.child.try_wait().ok().flatten();
                    Err(OracleError::External {
                        message: format!("scorer exited ({status:?}) without a response"),
                        raw: String::new(),
                    })
                }
            },
        };
        let _ = std::fs::remove_file(&path);
        result
    }
}

impl Drop for ExternalScorer {
    fn drop(&mut self) {
        let proc = self.process.get_mut().unwrap_or_else(|p| p.into_inner());
        let _ = proc.child.kill();
        let _ = proc.child.wait();
        let _ = std::fs::remove_dir_all(&self.scratch);
    }
}

/// Memoizes another oracle by a hash of the image content.
pub struct CachedOracle<O> {
    inner: O,
    cache: Mutex<HashMap<[u8; 32], RatingDistribution>>,
}

impl<O: AestheticOracle> CachedOracle<O> {
    pub fn new(inner: O) -> Self {
        Self {
            inner,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn cached_entries(&self) -> usize {
        self.cache.lock().map(|c| c.len()).unwrap_or(0)
    }
}

impl<O: AestheticOracle> AestheticOracle for CachedOracle<O> {
    fn score(&self, img: &ImageTensor) -> Result<RatingDistribution, OracleError> {
        let key: [u8; 32] = Sha256::digest(img.content_bytes()).into();
        if let Some(d) = self.cache.lock().unwrap().get(&key) {
            return Ok(*d);
        }
        let d = self.inner.score(img)?;
        self.cache.lock().unwrap().insert(key, d);
        Ok(d)
    }
}

impl AestheticOracle for Box<dyn AestheticOracle> {
    fn score(&self, img: &ImageTensor) -> Result<RatingDistribution, OracleError> {
        (**self).score(img)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleKind {
    Proxy,
    External,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleConfig {
    pub kind: OracleKind,
    pub command: Option<String>,
    pub proxy: ProxyParams,
    pub timeout: Duration,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            kind: OracleKind::Proxy,
            command: None,
            proxy: ProxyParams::default(),
            timeout: EXTERNAL_TIMEOUT,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<(), OracleError> {
        self.proxy.validate()?;
        if self.kind == OracleKind::External && self.command.as_deref().is_none_or(str::is_empty) {
            return Err(OracleError::Config("external oracle needs a command".into()));
        }
        Ok(())
    }

    /// Builds the configured scorer behind a content-hash cache.
    pub fn build(&self) -> Result<Box<dyn AestheticOracle>, OracleError> {
        self.validate()?;
        Ok(match self.kind {
            OracleKind::Proxy => Box::new(CachedOracle::new(ProxyScorer::new(self.proxy.clone())?)),
            OracleKind::External => {
                let command = self.command.as_deref().expect("validated");
                Box::new(CachedOracle::new(ExternalScorer::spawn(command, self.timeout)?))
            }
        })
    }
}
