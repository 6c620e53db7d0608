use super::NnError;

/// Dense row-major tensor of 64-bit values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NnError> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(NnError::Shape(format!(
                "shape {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on a tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self, NnError> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(NnError::Shape(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    /// `[C, H, W]` to `[H, W, C]`.
    pub fn chw_to_hwc(&self) -> Result<Self, NnError> {
        let [c, h, w] = self.dims3()?;
        let mut out = vec![0.0; self.data.len()];
        for ch in 0..c {
            for p in 0..h * w {
                out[p * c + ch] = self.data[ch * h * w + p];
            }
        }
        Tensor::new(vec![h, w, c], out)
    }

    /// `[H, W, C]` to `[C, H, W]`.
    pub fn hwc_to_chw(&self) -> Result<Self, NnError> {
        let [h, w, c] = self.dims3()?;
        let mut out = vec![0.0; self.data.len()];
        for p in 0..h * w {
            for ch in 0..c {
                out[ch * h * w + p] = self.data[p * c + ch];
            }
        }
        Tensor::new(vec![c, h, w], out)
    }

    pub(crate) fn dims3(&self) -> Result<[usize; 3], NnError> {
        match self.shape[..] {
            [a, b, c] => Ok([a, b, c]),
            _ => Err(NnError::Shape(format!("expected 3 dims, got {:?}", self.shape))),
        }
    }
}

/// Softmax over the last axis of an `[H, W, A]` tensor, with max subtraction.
pub fn softmax_per_pixel(logits: &Tensor) -> Result<Tensor, NnError> {
    let [_, _, a] = logits.dims3()?;
    let mut out = logits.data().to_vec();
    for px in out.chunks_exact_mut(a) {
        let m = px.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in px.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in px.iter_mut() {
            *v /= sum;
        }
    }
    Tensor::new(logits.shape().to_vec(), out)
}
