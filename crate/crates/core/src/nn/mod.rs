//! Minimal neural-network substrate: dense tensors, a reverse-mode
//! differentiation tape, the fully-convolutional policy/value network,
//! Adam, and a binary checkpoint format.

mod adam;
mod checkpoint;
mod graph;
mod tensor;

use std::collections::HashSet;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::image::ImageTensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use graph::{Graph, Var};
pub use tensor::{softmax_per_pixel, Tensor};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("backward called on a value outside the recorded graph")]
    NoGraph,
    #[error("no gradients have been accumulated")]
    MissingGradients,
    #[error("architecture mismatch: {0}")]
    Architecture(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Layer layout of the shared-trunk network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    /// Channel counts through the trunk, starting with the 3 input channels.
    pub trunk: Vec<usize>,
    pub kernel: usize,
    pub head_kernel: usize,
    /// Policy head width, one channel per action.
    pub actions: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            trunk: vec![3, 32, 32, 32, 32],
            kernel: 3,
            head_kernel: 3,
            actions: 28,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.trunk.len() < 2 || self.trunk[0] != 3 {
            return Err(NnError::Architecture(format!(
                "trunk must start at 3 channels and have at least one layer: {:?}",
                self.trunk
            )));
        }
        if self.trunk.contains(&0) || self.actions == 0 {
            return Err(NnError::Architecture("zero-width layer".into()));
        }
        if self.kernel.is_multiple_of(2) || self.head_kernel.is_multiple_of(2) {
            return Err(NnError::Architecture("kernel sizes must be odd".into()));
        }
        Ok(())
    }

    /// Parameter names and shapes in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (i, pair) in self.trunk.windows(2).enumerate() {
            let (cin, cout) = (pair[0], pair[1]);
            out.push((format!("trunk.{i}.weight"), vec![cout, cin, self.kernel, self.kernel]));
            out.push((format!("trunk.{i}.bias"), vec![cout]));
        }
        let width = *self.trunk.last().expect("non-empty trunk");
        let hk = self.head_kernel;
        out.push(("policy.weight".into(), vec![self.actions, width, hk, hk]));
        out.push(("policy.bias".into(), vec![self.actions]));
        out.push(("value.weight".into(), vec![1, width, hk, hk]));
        out.push(("value.bias".into(), vec![1]));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.layout().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let trunk: Vec<String> = self.trunk.iter().map(usize::to_string).collect();
        write!(
            f,
            "trunk={} kernel={} head_kernel={} actions={}",
            trunk.join(","),
            self.kernel,
            self.head_kernel,
            self.actions
        )
    }
}

/// Named, ordered parameter tensors plus an optional gradient buffer per
/// tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    arch: Architecture,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    grads: Option<Vec<Vec<f64>>>,
}

impl NetworkParams {
    /// Kaiming-uniform weights (fan-in, ReLU gain for the trunk, unit gain for
    /// the linear heads) and zero biases.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self, NnError> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut named = Vec::new();
        for (name, shape) in arch.layout() {
            let len = shape.iter().product();
            let data = if name.ends_with(".bias") {
                vec![0.0; len]
            } else {
                let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
                let gain = if name.starts_with("trunk") { 2.0 } else { 1.0 };
                let bound = (3.0 * gain / fan_in).sqrt();
                (0..len).map(|_| rng.gen_range(-bound..bound)).collect()
            };
            named.push((name, Tensor::new(shape, data)?));
        }
        Self::from_named(arch, named)
    }

    /// Every parameter zero: uniform policy and zero value everywhere.
    pub fn zeros(arch: Architecture) -> Result<Self, NnError> {
        arch.validate()?;
        let named = arch.layout().into_iter().map(|(n, s)| (n, Tensor::zeros(s))).collect();
        Self::from_named(arch, named)
    }

    pub fn from_named(arch: Architecture, named: Vec<(String, Tensor)>) -> Result<Self, NnError> {
        let mut seen = HashSet::new();
        for (name, _) in &named {
            if !seen.insert(name.clone()) {
                return Err(NnError::Architecture(format!("duplicate parameter {name}")));
            }
        }
        let (names, tensors) = named.into_iter().unzip();
        Ok(Self {
            arch,
            names,
            tensors,
            grads: None,
        })
    }

    /// Checks names and shapes against the architecture descriptor.
    pub fn check_layout(&self) -> Result<(), NnError> {
        self.arch.validate()?;
        let layout = self.arch.layout();
        if layout.len() != self.tensors.len() {
            return Err(NnError::Architecture(format!(
                "expected {} tensors, found {}",
                layout.len(),
                self.tensors.len()
            )));
        }
        for ((name, shape), (have, t)) in layout.iter().zip(self.names.iter().zip(&self.tensors)) {
            if name != have || shape.as_slice() != t.shape() {
                return Err(NnError::Architecture(format!(
                    "expected {name} {shape:?}, found {have} {:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn grads(&self) -> Option<&[Vec<f64>]> {
        self.grads.as_deref()
    }

    /// Resets every gradient buffer to zero.
    pub fn zero_grad(&mut self) {
        self.grads = Some(self.tensors.iter().map(|t| vec![0.0; t.len()]).collect());
    }

    pub fn take_grads(&mut self) -> Option<Vec<Vec<f64>>> {
        self.grads.take()
    }

    pub(crate) fn accumulate_grad(&mut self, index: usize, g: &[f64]) -> Result<(), NnError> {
        if self.grads.is_none() {
            self.zero_grad();
        }
        let buf = &mut self.grads.as_mut().expect("initialized")[index];
        if buf.len() != g.len() {
            return Err(NnError::Shape(format!(
                "gradient of {} values for parameter {} of {}",
                g.len(),
                self.names[index],
                buf.len()
            )));
        }
        for (d, s) in buf.iter_mut().zip(g) {
            *d += s;
        }
        Ok(())
    }

    /// Copies parameter values from `other` (same layout), leaving gradients
    /// untouched.
    pub fn copy_values_from(&mut self, other: &NetworkParams) {
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            dst.data_mut().copy_from_slice(src.data());
        }
    }

    /// Rounds every value to the nearest 32-bit float, the checkpoint
    /// storage precision.
    pub fn round_to_f32(&mut self) {
        for t in &mut self.tensors {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// Runs the network on one image inside `g`, returning the policy logits
/// `[A, H, W]` and the value map `[1, H, W]`.
pub fn forward(g: &mut Graph, params: &NetworkParams, input: &ImageTensor) -> Result<(Var, Var), NnError> {
    let arch = params.architecture();
    let x = Tensor::new(vec![3, input.height(), input.width()], input.to_planar())?;
    let mut h = g.constant(x);
    let layers = arch.trunk.len() - 1;
    for i in 0..layers {
        let w = g.param(params, 2 * i);
        let b = g.param(params, 2 * i + 1);
        let c = g.conv2d(h, w, b)?;
        h = g.relu(c);
    }
    let base = 2 * layers;
    let (pw, pb) = (g.param(params, base), g.param(params, base + 1));
    let logits = g.conv2d(h, pw, pb)?;
    let (vw, vb) = (g.param(params, base + 2), g.param(params, base + 3));
    let value = g.conv2d(h, vw, vb)?;
    Ok((logits, value))
}

/// Policy logits as `[H, W, A]` and value map as `[H, W]`.
pub fn forward_conv_net(params: &NetworkParams, input: &ImageTensor) -> Result<(Tensor, Tensor), NnError> {
    params.check_layout()?;
    let mut g = Graph::new();
    let (logits, value) = forward(&mut g, params, input)?;
    let logits = g.value(logits).chw_to_hwc()?;
    let value = g.value(value).clone().reshape(vec![input.height(), input.width()])?;
    Ok((logits, value))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_arch() -> Architecture {
        Architecture {
            trunk: vec![3, 4, 4],
            kernel: 3,
            head_kernel: 3,
            actions: 5,
        }
    }

    #[test]
    fn zero_network_outputs_zero() {
        let params = NetworkParams::zeros(small_arch()).unwrap();
        let img = ImageTensor::from_fn(6, 5, |y, x| [0.1 * y as f64, 0.1 * x as f64, 0.5]);
        let (logits, value) = forward_conv_net(&params, &img).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
        assert!(value.data().iter().all(|&v| v == 0.0));
        let probs = softmax_per_pixel(&logits).unwrap();
        assert!(probs.data().iter().all(|&p| (p - 0.2).abs() < 1e-15));
    }

    #[test]
    fn default_shapes_preserved() {
        let params = NetworkParams::init(Architecture::default(), 3).unwrap();
        let img = ImageTensor::uniform(64, 64, 0.2);
        let (logits, value) = forward_conv_net(&params, &img).unwrap();
        assert_eq!(logits.shape(), &[64, 64, 28]);
        assert_eq!(value.shape(), &[64, 64]);
    }

    #[test]
    fn forward_is_bit_reproducible() {
        let params = NetworkParams::init(small_arch(), 11).unwrap();
        let img = ImageTensor::from_fn(7, 9, |y, x| [(y * x) as f64 / 63.0, 0.3, 0.6]);
        let (a, b) = (
            forward_conv_net(&params, &img).unwrap(),
            forward_conv_net(&params, &img).unwrap(),
        );
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.0), bits(&b.0));
        assert_eq!(bits(&a.1), bits(&b.1));
        let again = NetworkParams::init(small_arch(), 11).unwrap();
        assert_eq!(again, params);
    }

    #[test]
    fn layout_mismatch_detected() {
        let mut params = NetworkParams::init(small_arch(), 1).unwrap();
        params.arch.actions = 6;
        assert!(forward_conv_net(&params, &ImageTensor::uniform(3, 3, 0.5)).is_err());
    }

    #[test]
    fn architecture_validation() {
        let mut arch = small_arch();
        arch.kernel = 2;
        assert!(arch.validate().is_err());
        arch = small_arch();
        arch.trunk = vec![1, 4];
        assert!(arch.validate().is_err());
        assert_eq!(
            Architecture::default().to_string(),
            "trunk=3,32,32,32,32 kernel=3 head_kernel=3 actions=28"
        );
    }

    #[test]
    fn round_to_f32_is_idempotent() {
        let mut params = NetworkParams::init(small_arch(), 5).unwrap();
        params.round_to_f32();
        let once = params.clone();
        params.round_to_f32();
        assert_eq!(once, params);
    }
}
