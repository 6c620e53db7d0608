//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its value; `backward` walks the
//! tape in reverse and deposits parameter gradients into a
//! [`NetworkParams`](super::NetworkParams), adding to whatever is already
//! there.

use super::{NetworkParams, NnError, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(usize),
    Conv2d { x: Var, w: Var, b: Var },
    Relu(Var),
    LogSoftmaxChannels(Var),
    Exp(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Square(Var),
    Sum(Var),
    GatherChannels { x: Var, indices: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    /// A leaf bound to parameter `index` of `params`.
    pub fn param(&mut self, params: &NetworkParams, index: usize) -> Var {
        self.push(params.tensor(index).clone(), Op::Param(index))
    }

    /// Stride-1 convolution with zero padding `k / 2` on a single `[Ci, H, W]`
    /// input, weights `[Co, Ci, K, K]` and bias `[Co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NnError> {
        let [ci, h, wd] = self.value(x).dims3()?;
        let ws = self.value(w).shape().to_vec();
        let [co, wci, k, k2] = ws[..] else {
            return Err(NnError::Shape(format!("conv weight shape {ws:?}")));
        };
        if wci != ci || k != k2 || k % 2 == 0 || self.value(b).shape() != [co] {
            return Err(NnError::Shape(format!(
                "conv input {ci}x{h}x{wd}, weight {ws:?}, bias {:?}",
                self.value(b).shape()
            )));
        }
        let mut out = vec![0.0; co * h * wd];
        conv_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            &mut out,
            [ci, co, h, wd, k],
        );
        let value = Tensor::new(vec![co, h, wd], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| a.max(0.0)).collect();
        let value = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Relu(x))
    }

    /// Log-softmax over axis 0 of a `[C, H, W]` tensor.
    pub fn log_softmax_channels(&mut self, x: Var) -> Result<Var, NnError> {
        let v = self.value(x);
        let [c, h, w] = v.dims3()?;
        let n = h * w;
        let src = v.data();
        let mut out = vec![0.0; src.len()];
        for p in 0..n {
            let mut m = f64::NEG_INFINITY;
            for ch in 0..c {
                m = m.max(src[ch * n + p]);
            }
            let mut sum = 0.0;
            for ch in 0..c {
                sum += (src[ch * n + p] - m).exp();
            }
            let lse = m + sum.ln();
            for ch in 0..c {
                out[ch * n + p] = src[ch * n + p] - lse;
            }
        }
        let value = Tensor::new(vec![c, h, w], out)?;
        Ok(self.push(value, Op::LogSoftmaxChannels(x)))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|a| a.exp()).collect();
        let value = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Exp(x))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, NnError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.len() != vb.len() {
            return Err(NnError::Shape(format!(
                "elementwise operands {:?} and {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let value = self.binary(a, b, |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let value = self.binary(a, b, |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let value = self.binary(a, b, |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|a| a * c).collect();
        let value = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Scale(x, c))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|a| a * a).collect();
        let value = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Square(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Picks channel `indices[p]` at every pixel `p` of a `[C, H, W]` tensor,
    /// giving `[H, W]`.
    pub fn gather_channels(&mut self, x: Var, indices: Vec<usize>) -> Result<Var, NnError> {
        let v = self.value(x);
        let [c, h, w] = v.dims3()?;
        let n = h * w;
        if indices.len() != n {
            return Err(NnError::Shape(format!("{} indices for {n} pixels", indices.len())));
        }
        if let Some(&i) = indices.iter().find(|&&i| i >= c) {
            return Err(NnError::Shape(format!("channel index {i} out of {c}")));
        }
        let data = indices.iter().enumerate().map(|(p, &i)| v.data()[i * n + p]).collect();
        let value = Tensor::new(vec![h, w], data)?;
        Ok(self.push(value, Op::GatherChannels { x, indices }))
    }

    /// Back-propagates from the scalar `loss` and adds parameter gradients
    /// into `params`.
    pub fn backward(&self, loss: Var, params: &mut NetworkParams) -> Result<(), NnError> {
        if loss.0 >= self.nodes.len() {
            return Err(NnError::NoGraph);
        }
        if self.value(loss).len() != 1 {
            return Err(NnError::Shape(format!(
                "loss must be scalar, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()])
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant => {}
                Op::Param(index) => params.accumulate_grad(*index, &g)?,
                Op::Conv2d { x, w, b } => {
                    let [ci, h, wd] = self.value(*x).dims3()?;
                    let ws = self.value(*w).shape();
                    let (co, k) = (ws[0], ws[2]);
                    let mut gx = vec![0.0; ci * h * wd];
                    let mut gw = vec![0.0; self.value(*w).len()];
                    let mut gb = vec![0.0; co];
                    conv_backward(
                        self.value(*x).data(),
                        self.value(*w).data(),
                        &g,
                        &mut gx,
                        &mut gw,
                        &mut gb,
                        [ci, co, h, wd, k],
                    );
                    add_into(acc(&mut grads, &self.nodes, *x), &gx);
                    add_into(acc(&mut grads, &self.nodes, *w), &gw);
                    add_into(acc(&mut grads, &self.nodes, *b), &gb);
                }
                Op::Relu(x) => {
                    let xs = self.value(*x).data();
                    let dst = acc(&mut grads, &self.nodes, *x);
                    for ((d, &gi), &xi) in dst.iter_mut().zip(&g).zip(xs) {
                        if xi > 0.0 {
                            *d += gi;
                        }
                    }
                }
                Op::LogSoftmaxChannels(x) => {
                    let [c, h, w] = node.value.dims3()?;
                    let n = h * w;
                    let y = node.value.data();
                    let dst = acc(&mut grads, &self.nodes, *x);
                    for p in 0..n {
                        let total: f64 = (0..c).map(|ch| g[ch * n + p]).sum();
                        for ch in 0..c {
                            dst[ch * n + p] += g[ch * n + p] - y[ch * n + p].exp() * total;
                        }
                    }
                }
                Op::Exp(x) => {
                    let y = node.value.data();
                    let dst = acc(&mut grads, &self.nodes, *x);
                    for ((d, &gi), &yi) in dst.iter_mut().zip(&g).zip(y) {
                        *d += gi * yi;
                    }
                }
                Op::Add(a, b) => {
                    add_into(acc(&mut grads, &self.nodes, *a), &g);
                    add_into(acc(&mut grads, &self.nodes, *b), &g);
                }
                Op::Sub(a, b) => {
                    add_into(acc(&mut grads, &self.nodes, *a), &g);
                    let dst = acc(&mut grads, &self.nodes, *b);
                    for (d, gi) in dst.iter_mut().zip(&g) {
                        *d -= gi;
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                    let dst = acc(&mut grads, &self.nodes, *a);
                    for ((d, gi), y) in dst.iter_mut().zip(&g).zip(vb) {
                        *d += gi * y;
                    }
                    let dst = acc(&mut grads, &self.nodes, *b);
                    for ((d, gi), x) in dst.iter_mut().zip(&g).zip(va) {
                        *d += gi * x;
                    }
                }
                Op::Scale(x, c) => {
                    let dst = acc(&mut grads, &self.nodes, *x);
                    for (d, gi) in dst.iter_mut().zip(&g) {
                        *d += gi * c;
                    }
                }
                Op::Square(x) => {
                    let xs = self.value(*x).data();
                    let dst = acc(&mut grads, &self.nodes, *x);
                    for ((d, gi), xi) in dst.iter_mut().zip(&g).zip(xs) {
                        *d += 2.0 * gi * xi;
                    }
                }
                Op::Sum(x) => {
                    let dst = acc(&mut grads, &self.nodes, *x);
                    for d in dst.iter_mut() {
                        *d += g[0];
                    }
                }
                Op::GatherChannels { x, indices } => {
                    let n = indices.len();
                    let dst = acc(&mut grads, &self.nodes, *x);
                    for (p, &ch) in indices.iter().enumerate() {
                        dst[ch * n + p] += g[p];
                    }
                }
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Valid output range along one axis for kernel offset `off` (already
/// shifted by the padding): output positions whose input `pos + off` lies
/// inside `[0, len)`.
#[inline]
fn valid_range(off: isize, len: usize) -> (usize, usize) {
    let start = (-off).max(0) as usize;
    let end = (len as isize - off).clamp(0, len as isize) as usize;
    (start, end.max(start))
}

fn conv_forward(x: &[f64], w: &[f64], b: &[f64], out: &mut [f64], dims: [usize; 5]) {
    let [ci, co, h, wd, k] = dims;
    let pad = (k / 2) as isize;
    let plane = h * wd;
    for o in 0..co {
        let dst = &mut out[o * plane..(o + 1) * plane];
        dst.fill(b[o]);
        for i in 0..ci {
            let src = &x[i * plane..(i + 1) * plane];
            for ky in 0..k {
                let dy = ky as isize - pad;
                let (y0, y1) = valid_range(dy, h);
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let (x0, x1) = valid_range(dx, wd);
                    let wv = w[((o * ci + i) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let row_out = &mut dst[y * wd + x0..y * wd + x1];
                        let sx0 = (x0 as isize + dx) as usize;
                        let row_in = &src[sy * wd + sx0..sy * wd + sx0 + (x1 - x0)];
                        for (d, s) in row_out.iter_mut().zip(row_in) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(x: &[f64], w: &[f64], g: &[f64], gx: &mut [f64], gw: &mut [f64], gb: &mut [f64], dims: [usize; 5]) {
    let [ci, co, h, wd, k] = dims;
    let pad = (k / 2) as isize;
    let plane = h * wd;
    for o in 0..co {
        let go = &g[o * plane..(o + 1) * plane];
        gb[o] += go.iter().sum::<f64>();
        for i in 0..ci {
            let src = &x[i * plane..(i + 1) * plane];
            let gsrc = &mut gx[i * plane..(i + 1) * plane];
            for ky in 0..k {
                let dy = ky as isize - pad;
                let (y0, y1) = valid_range(dy, h);
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let (x0, x1) = valid_range(dx, wd);
                    let widx = ((o * ci + i) * k + ky) * k + kx;
                    let wv = w[widx];
                    let mut dw = 0.0;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let sx0 = (x0 as isize + dx) as usize;
                        let row_g = &go[y * wd + x0..y * wd + x1];
                        let range = sy * wd + sx0..sy * wd + sx0 + (x1 - x0);
                        for (gi, s) in row_g.iter().zip(&src[range.clone()]) {
                            dw += gi * s;
                        }
                        for (d, gi) in gsrc[range].iter_mut().zip(row_g) {
                            *d += wv * gi;
                        }
                    }
                    gw[widx] += dw;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Architecture, NetworkParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn params_from(tensors: Vec<Tensor>) -> NetworkParams {
        let named = tensors
            .into_iter()
            .enumerate()
            .map(|(i, t)| (format!("p{i}"), t))
            .collect();
        NetworkParams::from_named(Architecture::default(), named).unwrap()
    }

    /// Compares analytic gradients of `build` with central differences.
    fn check(params: &mut NetworkParams, build: impl Fn(&mut Graph, &NetworkParams) -> Var) -> f64 {
        params.zero_grad();
        let mut g = Graph::new();
        let loss = build(&mut g, params);
        g.backward(loss, params).unwrap();
        let analytic = params.grads().unwrap().to_vec();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for t in 0..params.len() {
            for j in 0..params.tensor(t).len() {
                let orig = params.tensor(t).data()[j];
                params.tensor_mut(t).data_mut()[j] = orig + h;
                let mut g1 = Graph::new();
                let v = build(&mut g1, params);
                let up = g1.value(v).item();
                params.tensor_mut(t).data_mut()[j] = orig - h;
                let mut g2 = Graph::new();
                let v = build(&mut g2, params);
                let down = g2.value(v).item();
                params.tensor_mut(t).data_mut()[j] = orig;
                let numeric = (up - down) / (2.0 * h);
                let a = analytic[t][j];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
                worst = worst.max(rel);
            }
        }
        worst
    }

    #[test]
    fn sum_of_param_has_unit_gradient() {
        let mut params = params_from(vec![Tensor::new(vec![2, 3], vec![0.5; 6]).unwrap()]);
        let mut g = Graph::new();
        let p = g.param(&params, 0);
        let loss = g.sum(p);
        g.backward(loss, &mut params).unwrap();
        assert_eq!(params.grads().unwrap()[0], vec![1.0; 6]);
    }

    #[test]
    fn zero_scaled_loss_has_zero_gradient() {
        let mut params = params_from(vec![Tensor::new(vec![3], vec![1.0, -2.0, 3.0]).unwrap()]);
        let mut g = Graph::new();
        let p = g.param(&params, 0);
        let e = g.exp(p);
        let s = g.sum(e);
        let loss = g.scale(s, 0.0);
        g.backward(loss, &mut params).unwrap();
        assert!(params.grads().unwrap()[0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_foreign_or_vector_loss() {
        let mut params = params_from(vec![Tensor::zeros(vec![2])]);
        let g = Graph::new();
        assert!(matches!(g.backward(Var(3), &mut params), Err(NnError::NoGraph)));
        let mut g = Graph::new();
        let p = g.param(&params, 0);
        assert!(g.backward(p, &mut params).is_err());
    }

    #[test]
    fn conv_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = params_from(vec![
            random_tensor(&mut rng, vec![2, 5, 4]),
            random_tensor(&mut rng, vec![3, 2, 3, 3]),
            random_tensor(&mut rng, vec![3]),
            random_tensor(&mut rng, vec![3, 5, 4]),
        ]);
        let worst = check(&mut params, |g, p| {
            let x = g.param(p, 0);
            let w = g.param(p, 1);
            let b = g.param(p, 2);
            let y = g.conv2d(x, w, b).unwrap();
            let target = g.param(p, 3);
            let m = g.mul(y, target).unwrap();
            g.sum(m)
        });
        assert!(worst < 1e-6, "{worst}");
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_tensor(&mut rng, vec![2, 4, 5]);
        let w = random_tensor(&mut rng, vec![1, 2, 3, 3]);
        let mut g = Graph::new();
        let (vx, vw, vb) = (
            g.constant(x.clone()),
            g.constant(w.clone()),
            g.constant(Tensor::new(vec![1], vec![0.25]).unwrap()),
        );
        let y = g.conv2d(vx, vw, vb).unwrap();
        for yy in 0..4isize {
            for xx in 0..5isize {
                let mut expect = 0.25;
                for c in 0..2 {
                    for ky in -1..=1isize {
                        for kx in -1..=1isize {
                            let (sy, sx) = (yy + ky, xx + kx);
                            if (0..4).contains(&sy) && (0..5).contains(&sx) {
                                expect += w.data()[(c * 3 + (ky + 1) as usize) * 3 + (kx + 1) as usize]
                                    * x.data()[c * 20 + sy as usize * 5 + sx as usize];
                            }
                        }
                    }
                }
                let got = g.value(y).data()[yy as usize * 5 + xx as usize];
                assert!((got - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn elementwise_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = params_from(vec![random_tensor(&mut rng, vec![6]), random_tensor(&mut rng, vec![6])]);
        let worst = check(&mut params, |g, p| {
            let a = g.param(p, 0);
            let b = g.param(p, 1);
            let r = g.relu(a);
            let e = g.exp(b);
            let m = g.mul(r, e).unwrap();
            let d = g.sub(m, b).unwrap();
            let s = g.square(d);
            let t = g.add(s, a).unwrap();
            let u = g.scale(t, 0.7);
            g.mean(u)
        });
        assert!(worst < 1e-6, "{worst}");
    }

    #[test]
    fn softmax_cross_entropy_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut params = params_from(vec![
            random_tensor(&mut rng, vec![5, 3, 2]),
            random_tensor(&mut rng, vec![3, 2]),
        ]);
        let picks = vec![0, 4, 2, 2, 1, 3];
        let worst = check(&mut params, |g, p| {
            let logits = g.param(p, 0);
            let weights = g.param(p, 1);
            let ls = g.log_softmax_channels(logits).unwrap();
            let chosen = g.gather_channels(ls, picks.clone()).unwrap();
            let wc = g.mul(chosen, weights).unwrap();
            let probs = g.exp(ls);
            let ent = g.mul(probs, ls).unwrap();
            let a = g.sum(wc);
            let b = g.sum(ent);
            g.add(a, b).unwrap()
        });
        assert!(worst < 1e-6, "{worst}");
    }

    #[test]
    fn log_softmax_normalizes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![3, 1, 2], vec![1.0, 500.0, 2.0, 500.0, 3.0, -500.0]).unwrap());
        let ls = g.log_softmax_channels(x).unwrap();
        let v = g.value(ls).data();
        for p in 0..2 {
            let s: f64 = (0..3).map(|c| v[c * 2 + p].exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn accumulation_is_additive() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params = params_from(vec![random_tensor(&mut rng, vec![4])]);
        let l1 = |g: &mut Graph, p: &NetworkParams| {
            let a = g.param(p, 0);
            let s = g.square(a);
            g.sum(s)
        };
        let l2 = |g: &mut Graph, p: &NetworkParams| {
            let a = g.param(p, 0);
            let e = g.exp(a);
            g.sum(e)
        };
        params.zero_grad();
        for f in [&l1 as &dyn Fn(&mut Graph, &NetworkParams) -> Var, &l2] {
            let mut g = Graph::new();
            let v = f(&mut g, &params);
            g.backward(v, &mut params).unwrap();
        }
        let separate = params.grads().unwrap()[0].clone();
        params.zero_grad();
        let mut g = Graph::new();
        let a = l1(&mut g, &params);
        let b = l2(&mut g, &params);
        let s = g.add(a, b).unwrap();
        g.backward(s, &mut params).unwrap();
        for (x, y) in separate.iter().zip(&params.grads().unwrap()[0]) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
