//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends one node holding its forward value and the information
//! its backward rule needs. Inputs always precede outputs, so a single
//! reverse sweep over the node list is a valid topological traversal.
//!
//! A tape built with [`Tape::no_grad`] records values only; nothing is saved
//! for the backward pass and [`Tape::backward`] refuses to run.

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{
    check_same_shape, col2im, gemm_acc, gemm_nt_acc, gemm_tn_acc, im2col, inverse_perm,
    matmul_plan, permute, upsample_backward, upsample_forward, ConvGeom, Tensor,
};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for a user-defined op: `(inputs, output, grad_output) -> grad per input`.
pub type CustomBackward = Box<dyn Fn(&[&Tensor], &Tensor, &[f64]) -> Vec<Vec<f64>>>;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, bias: Var },
    AddChannel { x: Var, bias: Var },
    Scale { x: Var, factor: f64 },
    MatMul { a: Var, b: Var },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Narrow { x: Var, axis: usize, start: usize },
    Concat0 { parts: Vec<Var> },
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var>, out_geom: ConvGeom },
    Upsample { x: Var, factor: usize },
    Sum(Var),
    Mean(Var),
    Dropout { x: Var, mask: Vec<f64> },
    FocalCe { prob: Var, dlogit: Vec<f64> },
    Custom { inputs: Vec<Var>, backward: CustomBackward },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    tracking: bool,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

/// Lower clamp applied to probabilities before taking logs.
pub const PROB_EPS: f64 = 1e-7;

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            tracking: true,
            backward_done: false,
        }
    }

    pub fn no_grad() -> Self {
        Self {
            tracking: false,
            ..Self::new()
        }
    }

    pub fn is_tracking(&self) -> bool {
        self.tracking
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that participates in gradient computation (when the tape tracks).
    pub fn param(&mut self, value: Tensor) -> Var {
        let rg = self.tracking;
        self.push(value, rg, Op::Leaf)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Tape::backward`], if `v` received one.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Clears gradients so `backward` may run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, inputs: &[Var]) -> bool {
        self.tracking && inputs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn record(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Var {
        let rg = self.rg(inputs);
        self.push(value, rg, op)
    }

    fn zip_map(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        check_same_shape(va, vb, what)?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.record(out, &[a, b], op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| v * factor);
        self.record(out, &[x], Op::Scale { x, factor })
    }

    /// `x[..., d] + bias[d]`, broadcasting over all leading axes.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let d = *vx.shape().last().unwrap();
        if vb.numel() != d {
            return shape_err(format!("row bias {:?} does not match {:?}", vb.shape(), vx.shape()));
        }
        let b = vb.data();
        let data = vx.data().iter().enumerate().map(|(i, &v)| v + b[i % d]).collect();
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.record(out, &[x, bias], Op::AddRow { x, bias }))
    }

    /// `x[c, ...] + bias[c]`, broadcasting over all trailing axes.
    pub fn add_channel(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let c = vx.shape()[0];
        if vb.numel() != c {
            return shape_err(format!("channel bias {:?} does not match {:?}", vb.shape(), vx.shape()));
        }
        let inner = vx.numel() / c;
        let b = vb.data();
        let data = vx.data().iter().enumerate().map(|(i, &v)| v + b[i / inner]).collect();
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.record(out, &[x, bias], Op::AddChannel { x, bias }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = crate::tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.record(out, &[a, b], Op::MatMul { a, b }))
    }

    /// `x · w + b` for `x[..., in]`, `w[in, out]`, `b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.record(out, &[x], Op::Reshape(x)))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let out = permute(self.value(x), perm)?;
        Ok(self.record(out, &[x], Op::Permute { x, perm: perm.to_vec() }))
    }

    pub fn transpose2d(&mut self, x: Var) -> Result<Var> {
        self.permute(x, &[1, 0])
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        let shape = vx.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return shape_err(format!("narrow({axis}, {start}, {len}) out of range for {shape:?}"));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&vx.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let out = Tensor::new(out_shape, data)?;
        Ok(self.record(out, &[x], Op::Narrow { x, axis, start }))
    }

    /// Concatenation along axis 0.
    pub fn concat0(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        let mut data = Vec::new();
        let mut lead = 0;
        for &p in parts {
            let v = self.value(p);
            if v.shape()[1..] != first[1..] {
                return shape_err(format!("concat: {:?} vs {:?}", v.shape(), first));
            }
            lead += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = first;
        shape[0] = lead;
        let out = Tensor::new(shape, data)?;
        Ok(self.record(out, parts, Op::Concat0 { parts: parts.to_vec() }))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let vx = self.value(x);
        if axis >= vx.rank() {
            return shape_err(format!("softmax axis {axis} for shape {:?}", vx.shape()));
        }
        let (outer, len, inner) = split_axis(vx.shape(), axis);
        let src = vx.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * len + i) * inner + j;
                let max = (0..len).map(|i| src[at(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for i in 0..len {
                    let e = (src[at(i)] - max).exp();
                    out[at(i)] = e;
                    sum += e;
                }
                for i in 0..len {
                    out[at(i)] /= sum;
                }
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), out)?;
        Ok(self.record(out, &[x], Op::Softmax { x, axis }))
    }

    /// Layer normalization over the last axis with population variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let vx = self.value(x);
        let d = *vx.shape().last().unwrap();
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return shape_err(format!(
                "layer norm affine {:?}/{:?} does not match {:?}",
                self.shape(gamma),
                self.shape(beta),
                vx.shape()
            ));
        }
        let rows = vx.numel() / d;
        let mut xhat = vec![0.0; vx.numel()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &vx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = if var + eps > 0.0 { 1.0 / (var + eps).sqrt() } else { 0.0 };
            inv_std[r] = is;
            for (o, v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let data = xhat.iter().enumerate().map(|(i, &h)| h * g[i % d] + b[i % d]).collect();
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(&[x, gamma, beta]);
        let op = if rg {
            Op::LayerNorm { x, gamma, beta, xhat, inv_std }
        } else {
            Op::Leaf
        };
        Ok(self.push(out, rg, op))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.record(out, &[x], Op::Relu(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| {
            0.5 * v * (1.0 + (SQRT_2_OVER_PI * (v + GELU_C * v * v * v)).tanh())
        });
        self.record(out, &[x], Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.record(out, &[x], Op::Sigmoid(x))
    }

    /// Cross-correlation of `x[c_in, h, w]` with `w[c_out, c_in, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        if vx.rank() != 3 || vw.rank() != 4 || vw.shape()[1] != vx.shape()[0] || vw.shape()[2] != vw.shape()[3] {
            return shape_err(format!("conv2d input {:?} with weights {:?}", vx.shape(), vw.shape()));
        }
        let geom = ConvGeom {
            channels: vx.shape()[0],
            h: vx.shape()[1],
            w: vx.shape()[2],
            kernel: vw.shape()[2],
            stride,
            padding,
        };
        let (oh, ow) = geom.out_size()?;
        let cout = vw.shape()[0];
        let ckk = geom.channels * geom.kernel * geom.kernel;
        let cols = im2col(vx.data(), geom, oh, ow);
        let mut out = vec![0.0; cout * oh * ow];
        gemm_acc(vw.data(), &cols, &mut out, cout, ckk, oh * ow);
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b), cout)?;
        }
        let out = Tensor::new([cout, oh, ow], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.record(out, &inputs, Op::Conv2d { x, w, b, geom }))
    }

    /// Transposed convolution of `x[c_in, h, w]` with `w[c_in, c_out, k, k]`, no padding.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        if vx.rank() != 3 || vw.rank() != 4 || vw.shape()[0] != vx.shape()[0] || vw.shape()[2] != vw.shape()[3] || stride == 0 {
            return shape_err(format!("conv_transpose2d input {:?} with weights {:?}", vx.shape(), vw.shape()));
        }
        let (cin, h, wd) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let (cout, k) = (vw.shape()[1], vw.shape()[2]);
        let out_geom = ConvGeom {
            channels: cout,
            h: (h - 1) * stride + k,
            w: (wd - 1) * stride + k,
            kernel: k,
            stride,
            padding: 0,
        };
        let ckk = cout * k * k;
        let mut cols = vec![0.0; ckk * h * wd];
        gemm_tn_acc(vw.data(), vx.data(), &mut cols, ckk, cin, h * wd);
        let mut out = col2im(&cols, out_geom, h, wd);
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b), cout)?;
        }
        let out = Tensor::new([cout, out_geom.h, out_geom.w], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.record(out, &inputs, Op::ConvTranspose2d { x, w, b, out_geom }))
    }

    /// Bilinear upsampling of `x[c, h, w]` by an integer factor (align-corners=false).
    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        let vx = self.value(x);
        if vx.rank() != 3 || factor == 0 {
            return shape_err(format!("upsample of {:?} by {factor}", vx.shape()));
        }
        let (c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        if factor == 1 {
            let out = vx.clone();
            return Ok(self.record(out, &[x], Op::Reshape(x)));
        }
        let out = Tensor::new([c, h * factor, w * factor], upsample_forward(vx.data(), c, h, w, factor))?;
        Ok(self.record(out, &[x], Op::Upsample { x, factor }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.record(Tensor::scalar(s), &[x], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.record(Tensor::scalar(s), &[x], Op::Mean(x))
    }

    /// Inverted dropout; identity when `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let vx = self.value(x);
        let data = vx.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let out = Tensor::new(vx.shape().to_vec(), data).expect("same shape");
        self.record(out, &[x], Op::Dropout { x, mask })
    }

    /// Focal-weighted binary cross-entropy over a probability map.
    ///
    /// With `p_t` the probability of the true class (clamped to
    /// `[PROB_EPS, 1 - PROB_EPS]`) and `w = (1 - p_t)^gamma`, the loss is
    /// `sum(w * -ln p_t) / z`. When `normalizer` is `None`, `z = sum(w)` is
    /// computed from the current values; either way `z` is a constant for
    /// differentiation.
    pub fn focal_ce(&mut self, prob: Var, target: &[bool], gamma: f64, normalizer: Option<f64>) -> Result<Var> {
        let vp = self.value(prob);
        if vp.numel() != target.len() {
            return shape_err(format!(
                "loss target has {} pixels, prediction {:?}",
                target.len(),
                vp.shape()
            ));
        }
        let mut pt = Vec::with_capacity(target.len());
        let mut clamped = Vec::with_capacity(target.len());
        for (&p, &t) in vp.data().iter().zip(target) {
            let raw = if t { p } else { 1.0 - p };
            let c = raw.clamp(PROB_EPS, 1.0 - PROB_EPS);
            clamped.push(c != raw);
            pt.push(c);
        }
        let weights: Vec<f64> = pt.iter().map(|&p| (1.0 - p).powf(gamma)).collect();
        let z = normalizer.unwrap_or_else(|| weights.iter().sum());
        if !(z > 0.0) {
            return Err(Error::Contract(format!("focal normalizer must be positive, got {z}")));
        }
        let loss = pt.iter().zip(&weights).map(|(p, w)| -w * p.ln()).sum::<f64>() / z;
        // d loss / d prob, per pixel.
        let dlogit = pt
            .iter()
            .zip(&weights)
            .zip(target.iter().zip(&clamped))
            .map(|((&p, &w), (&t, &c))| {
                if c {
                    return 0.0;
                }
                let dw = if gamma == 0.0 { 0.0 } else { -gamma * (1.0 - p).powf(gamma - 1.0) };
                let d_pt = (dw * -p.ln() - w / p) / z;
                if t { d_pt } else { -d_pt }
            })
            .collect();
        Ok(self.record(Tensor::scalar(loss), &[prob], Op::FocalCe { prob, dlogit }))
    }

    /// Records an op whose forward value is already computed and whose
    /// backward rule is supplied by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: CustomBackward) -> Var {
        self.record(value, inputs, Op::Custom { inputs: inputs.to_vec(), backward })
    }

    /// Propagates `d loss / d node` to every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.tracking {
            return Err(Error::Contract("backward on a tape that does not track gradients".into()));
        }
        if self.backward_done {
            return Err(Error::Contract("backward already ran; call reset_grads first".into()));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.propagate(i, &g)?;
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, contrib: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(contrib) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&mut self, i: usize, g: &[f64]) -> Result<()> {
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        let res = self.propagate_op(i, &op, g);
        self.nodes[i].op = op;
        res
    }

    fn propagate_op(&mut self, i: usize, op: &Op, g: &[f64]) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(*a, g.to_vec());
                self.acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.acc(*a, g.to_vec());
                self.acc(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let c = g.iter().zip(self.value(*b).data()).map(|(x, y)| x * y).collect();
                    self.acc(*a, c);
                }
                if self.needs(*b) {
                    let c = g.iter().zip(self.value(*a).data()).map(|(x, y)| x * y).collect();
                    self.acc(*b, c);
                }
            }
            Op::AddRow { x, bias } => {
                self.acc(*x, g.to_vec());
                if self.needs(*bias) {
                    let d = self.value(*bias).numel();
                    let mut gb = vec![0.0; d];
                    for (k, v) in g.iter().enumerate() {
                        gb[k % d] += v;
                    }
                    self.acc(*bias, gb);
                }
            }
            Op::AddChannel { x, bias } => {
                self.acc(*x, g.to_vec());
                if self.needs(*bias) {
                    let c = self.value(*bias).numel();
                    self.acc(*bias, channel_sums(g, c));
                }
            }
            Op::Scale { x, factor } => self.acc(*x, g.iter().map(|v| v * factor).collect()),
            Op::MatMul { a, b } => {
                let plan = matmul_plan(self.shape(*a), self.shape(*b))?;
                let (m, k, n) = (plan.m, plan.k, plan.n);
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let mut ga = self.needs(*a).then(|| vec![0.0; va.len()]);
                let mut gb = self.needs(*b).then(|| vec![0.0; vb.len()]);
                for bi in 0..plan.batch {
                    let ao = if plan.a_batched { bi * m * k } else { 0 };
                    let bo = if plan.b_batched { bi * k * n } else { 0 };
                    let gc = &g[bi * m * n..(bi + 1) * m * n];
                    if let Some(ga) = ga.as_mut() {
                        gemm_nt_acc(gc, &vb[bo..bo + k * n], &mut ga[ao..ao + m * k], m, n, k);
                    }
                    if let Some(gb) = gb.as_mut() {
                        gemm_tn_acc(&va[ao..ao + m * k], gc, &mut gb[bo..bo + k * n], k, m, n);
                    }
                }
                if let Some(ga) = ga {
                    self.acc(*a, ga);
                }
                if let Some(gb) = gb {
                    self.acc(*b, gb);
                }
            }
            Op::Reshape(x) => self.acc(*x, g.to_vec()),
            Op::Permute { x, perm } => {
                let gt = Tensor::new(self.nodes[i].value.shape().to_vec(), g.to_vec())?;
                let back = permute(&gt, &inverse_perm(perm))?;
                self.acc(*x, back.into_data());
            }
            Op::Narrow { x, axis, start } => {
                let in_shape = self.shape(*x).to_vec();
                let len = self.nodes[i].value.shape()[*axis];
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let full = in_shape[*axis];
                let mut gx = vec![0.0; in_shape.iter().product()];
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    gx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                self.acc(*x, gx);
            }
            Op::Concat0 { parts } => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    self.acc(p, g[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::Softmax { x, axis } => {
                let y = &self.nodes[i].value;
                let (outer, len, inner) = split_axis(y.shape(), *axis);
                let yd = y.data();
                let mut gx = vec![0.0; yd.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + j;
                        let dot: f64 = (0..len).map(|k| g[at(k)] * yd[at(k)]).sum();
                        for k in 0..len {
                            gx[at(k)] = yd[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
                self.acc(*x, gx);
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let gam = self.value(*gamma).data().to_vec();
                let d = gam.len();
                let rows = xhat.len() / d;
                if self.needs(*x) {
                    let mut gx = vec![0.0; xhat.len()];
                    for r in 0..rows {
                        let span = r * d..(r + 1) * d;
                        let gh: Vec<f64> = g[span.clone()].iter().zip(&gam).map(|(a, b)| a * b).collect();
                        let mean_gh = gh.iter().sum::<f64>() / d as f64;
                        let mean_ghx = gh.iter().zip(&xhat[span.clone()]).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for (j, o) in gx[span.clone()].iter_mut().enumerate() {
                            *o = inv_std[r] * (gh[j] - mean_gh - xhat[r * d + j] * mean_ghx);
                        }
                    }
                    self.acc(*x, gx);
                }
                if self.needs(*gamma) {
                    let mut gg = vec![0.0; d];
                    for (k, (gv, h)) in g.iter().zip(xhat).enumerate() {
                        gg[k % d] += gv * h;
                    }
                    self.acc(*gamma, gg);
                }
                if self.needs(*beta) {
                    let mut gb = vec![0.0; d];
                    for (k, gv) in g.iter().enumerate() {
                        gb[k % d] += gv;
                    }
                    self.acc(*beta, gb);
                }
            }
            Op::Relu(x) => {
                let c = g.iter().zip(self.value(*x).data()).map(|(gv, &v)| if v > 0.0 { *gv } else { 0.0 }).collect();
                self.acc(*x, c);
            }
            Op::Gelu(x) => {
                let c = g
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(gv, &v)| {
                        let u = SQRT_2_OVER_PI * (v + GELU_C * v * v * v);
                        let t = u.tanh();
                        let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * v * v);
                        gv * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
                    })
                    .collect();
                self.acc(*x, c);
            }
            Op::Sigmoid(x) => {
                let c = g.iter().zip(self.nodes[i].value.data()).map(|(gv, y)| gv * y * (1.0 - y)).collect();
                self.acc(*x, c);
            }
            Op::Conv2d { x, w, b, geom } => {
                let (oh, ow) = geom.out_size()?;
                let n = oh * ow;
                let ckk = geom.channels * geom.kernel * geom.kernel;
                let vw = self.value(*w).data();
                let cout = self.shape(*w)[0];
                let gx = if self.needs(*x) {
                    let mut dcols = vec![0.0; ckk * n];
                    gemm_tn_acc(vw, g, &mut dcols, ckk, cout, n);
                    Some(col2im(&dcols, *geom, oh, ow))
                } else {
                    None
                };
                let gw = if self.needs(*w) {
                    let cols = im2col(self.value(*x).data(), *geom, oh, ow);
                    let mut gw = vec![0.0; cout * ckk];
                    gemm_nt_acc(g, &cols, &mut gw, cout, n, ckk);
                    Some(gw)
                } else {
                    None
                };
                if let Some(gx) = gx {
                    self.acc(*x, gx);
                }
                if let Some(gw) = gw {
                    self.acc(*w, gw);
                }
                if let Some(b) = b {
                    self.acc(*b, channel_sums(g, cout));
                }
            }
            Op::ConvTranspose2d { x, w, b, out_geom } => {
                let (cin, h, wd) = {
                    let s = self.shape(*x);
                    (s[0], s[1], s[2])
                };
                let cout = out_geom.channels;
                let ckk = cout * out_geom.kernel * out_geom.kernel;
                let dcols = im2col(g, *out_geom, h, wd);
                let gx = self.needs(*x).then(|| {
                    let mut gx = vec![0.0; cin * h * wd];
                    gemm_acc(self.value(*w).data(), &dcols, &mut gx, cin, ckk, h * wd);
                    gx
                });
                let gw = self.needs(*w).then(|| {
                    let mut gw = vec![0.0; cin * ckk];
                    gemm_nt_acc(self.value(*x).data(), &dcols, &mut gw, cin, h * wd, ckk);
                    gw
                });
                if let Some(gx) = gx {
                    self.acc(*x, gx);
                }
                if let Some(gw) = gw {
                    self.acc(*w, gw);
                }
                if let Some(b) = b {
                    self.acc(*b, channel_sums(g, cout));
                }
            }
            Op::Upsample { x, factor } => {
                let s = self.shape(*x).to_vec();
                self.acc(*x, upsample_backward(g, s[0], s[1], s[2], *factor));
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.acc(*x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                self.acc(*x, vec![g[0] / n as f64; n]);
            }
            Op::Dropout { x, mask } => self.acc(*x, g.iter().zip(mask).map(|(a, m)| a * m).collect()),
            Op::FocalCe { prob, dlogit } => self.acc(*prob, dlogit.iter().map(|d| d * g[0]).collect()),
            Op::Custom { inputs, backward } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let grads = backward(&ins, &self.nodes[i].value, g);
                for (v, gv) in inputs.iter().zip(grads) {
                    self.acc(*v, gv);
                }
            }
        }
        Ok(())
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn channel_sums(g: &[f64], c: usize) -> Vec<f64> {
    let inner = g.len() / c;
    g.chunks(inner).map(|ch| ch.iter().sum()).collect()
}

fn add_channel_bias(out: &mut [f64], bias: &Tensor, c: usize) -> Result<()> {
    if bias.numel() != c {
        return shape_err(format!("bias {:?} for {c} channels", bias.shape()));
    }
    let inner = out.len() / c;
    for (ch, chunk) in out.chunks_mut(inner).enumerate() {
        let b = bias.data()[ch];
        chunk.iter_mut().for_each(|v| *v += b);
    }
    Ok(())
}
