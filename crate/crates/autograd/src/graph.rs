//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation eagerly: values are computed as ops
//! are added, and [`Graph::backward`] walks the tape in reverse. A graph is
//! built per forward pass and dropped afterwards.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvDims, ConvTDims, Window};
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Pixels with this target label are excluded from the loss.
pub const IGNORE_LABEL: u8 = 255;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, dims: ConvDims },
    ConvT2d { x: Var, w: Var, b: Option<Var>, dims: ConvTDims },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    OneMinus(Var),
    Concat { inputs: Vec<Var>, channels: Vec<usize> },
    Slice { x: Var, start: usize, c_in: usize },
    Permute { x: Var, perm: Vec<usize> },
    MaxPool { x: Var, arg: Vec<usize> },
    AvgPool { x: Var, win: Window },
    WeightedCe { logits: Var, coef: Vec<f64>, probs: Vec<f64>, targets: Vec<u8> },
    Dot { x: Var, r: Tensor },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics observed by a training-mode batch norm, to be folded
/// into running statistics by the caller.
#[derive(Clone, Debug)]
pub struct BnObservation {
    pub key: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub struct Graph {
    nodes: Vec<Node>,
    training: bool,
    params: BTreeMap<String, Var>,
    bn_observations: Vec<BnObservation>,
    ce_all_ignored: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: BTreeMap<String, Var>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of every named parameter that received one.
    pub fn params(self) -> BTreeMap<String, Tensor> {
        let mut grads = self.grads;
        self.params
            .into_iter()
            .filter_map(|(name, v)| grads[v.0].take().map(|g| (name, g)))
            .collect()
    }
}

impl Graph {
    pub fn new(training: bool) -> Self {
        Self {
            nodes: Vec::new(),
            training,
            params: BTreeMap::new(),
            bn_observations: Vec::new(),
            ce_all_ignored: false,
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Batch statistics recorded by training-mode batch norms, in call order.
    pub fn take_bn_observations(&mut self) -> Vec<BnObservation> {
        std::mem::take(&mut self.bn_observations)
    }

    /// True if a weighted cross entropy on this graph saw no valid pixel.
    pub fn ce_all_ignored(&self) -> bool {
        self.ce_all_ignored
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Named trainable parameter. Repeated calls with the same name return
    /// the same node, so a layer applied at several time steps accumulates
    /// one gradient.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.leaf(t.clone());
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize, groups: usize) -> Result<Var> {
        let (n, c_in, h, wd) = self.value(x).dims4()?;
        let (c_out, cg, kh, kw) = self.value(w).dims4()?;
        if groups == 0 || c_in % groups != 0 || c_out % groups != 0 || cg * groups != c_in {
            return Err(Error::Shape(format!(
                "conv2d: input channels {c_in}, weight {:?}, groups {groups}",
                self.shape(w)
            )));
        }
        if let Some(b) = b {
            if self.value(b).len() != c_out {
                return Err(Error::Shape(format!("conv2d bias has {} entries, need {c_out}", self.value(b).len())));
            }
        }
        let win = Window { kh, kw, stride, pad };
        let (oh, ow) = win
            .conv_out(h, wd)
            .ok_or_else(|| Error::Shape(format!("conv2d: kernel {kh}x{kw} larger than padded {h}x{wd}")))?;
        let dims = ConvDims { n, c_in, h, w: wd, c_out, groups, oh, ow, win };
        let y = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &dims,
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(&[n, c_out, oh, ow], y)?, Op::Conv2d { x, w, b, dims }, rg))
    }

    /// Transposed convolution with weight `[c_in, c_out, kh, kw]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, c_in, h, wd) = self.value(x).dims4()?;
        let (wc_in, c_out, kh, kw) = self.value(w).dims4()?;
        if wc_in != c_in {
            return Err(Error::Shape(format!("conv_transpose2d: input channels {c_in}, weight {:?}", self.shape(w))));
        }
        let win = Window { kh, kw, stride, pad };
        let (oh, ow) = win
            .transpose_out(h, wd)
            .ok_or_else(|| Error::Shape("conv_transpose2d: empty output".into()))?;
        let dims = ConvTDims { n, c_in, h, w: wd, c_out, oh, ow, win };
        let y = kernels::conv_transpose2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &dims,
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(&[n, c_out, oh, ow], y)?, Op::ConvT2d { x, w, b, dims }, rg))
    }

    /// Per-channel batch normalization. Training graphs normalize with batch
    /// statistics and record them under `key`; inference graphs use the
    /// supplied running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        key: &str,
    ) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::Shape(format!("batch_norm: {c} channels but affine has {}", self.value(gamma).len())));
        }
        let plane = h * w;
        let m = (n * plane) as f64;
        let xd = self.value(x).data();
        let (mean, var) = if self.training {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut s = 0.0;
                for i in 0..n {
                    let off = (i * c + ch) * plane;
                    s += xd[off..off + plane].iter().sum::<f64>();
                }
                let mu = s / m;
                let mut v = 0.0;
                for i in 0..n {
                    let off = (i * c + ch) * plane;
                    v += xd[off..off + plane].iter().map(|a| (a - mu) * (a - mu)).sum::<f64>();
                }
                mean[ch] = mu;
                var[ch] = v / m;
            }
            (mean, var)
        } else {
            if running_mean.len() != c || running_var.len() != c {
                return Err(Error::Shape(format!("batch_norm: running stats do not have {c} channels")));
            }
            (running_mean.to_vec(), running_var.to_vec())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut y = vec![0.0; xd.len()];
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * plane;
                for k in off..off + plane {
                    let xh = (xd[k] - mean[ch]) * inv_std[ch];
                    xhat[k] = xh;
                    y[k] = g[ch] * xh + b[ch];
                }
            }
        }
        if self.training {
            let unbiased = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            self.bn_observations.push(BnObservation {
                key: key.to_string(),
                mean,
                var: var.iter().map(|v| v * unbiased).collect(),
            });
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(Tensor::new(&[n, c, h, w], y)?, Op::BatchNorm { x, gamma, beta, xhat, inv_std }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(y, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(y, Op::Sigmoid(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let y = self.value(x).map(f64::tanh);
        let rg = self.rg(x);
        self.push(y, Op::Tanh(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |p, q| p + q)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |p, q| p - q)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |p, q| p * q)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let y = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(y, Op::Scale(x, s), rg)
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| 1.0 - v);
        let rg = self.rg(x);
        self.push(y, Op::OneMinus(x), rg)
    }

    /// Arithmetic mean of equally shaped nodes.
    pub fn mean_of(&mut self, xs: &[Var]) -> Result<Var> {
        let (&first, rest) = xs.split_first().ok_or_else(|| Error::Argument("mean of zero tensors".into()))?;
        let mut acc = first;
        for &x in rest {
            acc = self.add(acc, x)?;
        }
        Ok(if xs.len() > 1 { self.scale(acc, 1.0 / xs.len() as f64) } else { acc })
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| Error::Argument("concat of zero tensors".into()))?;
        let (n, _, h, w) = self.value(first).dims4()?;
        let mut channels = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let (vn, vc, vh, vw) = self.value(v).dims4()?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(Error::Shape(format!(
                    "concat: {:?} incompatible with {:?}",
                    self.shape(v),
                    self.shape(first)
                )));
            }
            channels.push(vc);
        }
        let c: usize = channels.iter().sum();
        let plane = h * w;
        let mut y = Vec::with_capacity(n * c * plane);
        for i in 0..n {
            for (&v, &vc) in inputs.iter().zip(&channels) {
                let d = self.value(v).data();
                y.extend_from_slice(&d[i * vc * plane..(i + 1) * vc * plane]);
            }
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        let t = Tensor::new(&[n, c, h, w], y)?;
        Ok(self.push(t, Op::Concat { inputs: inputs.to_vec(), channels }, rg))
    }

    /// Channels `start..start+len`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if start + len > c || len == 0 {
            return Err(Error::Shape(format!("slice {start}..{} out of {c} channels", start + len)));
        }
        let plane = h * w;
        let d = self.value(x).data();
        let mut y = Vec::with_capacity(n * len * plane);
        for i in 0..n {
            let off = (i * c + start) * plane;
            y.extend_from_slice(&d[off..off + len * plane]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[n, len, h, w], y)?, Op::Slice { x, start, c_in: c }, rg))
    }

    /// Channel shuffle: view channels as `(groups, c/groups)`, transpose, flatten.
    pub fn channel_shuffle(&mut self, x: Var, groups: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::Argument(format!("channel_shuffle: {groups} groups do not divide {c} channels")));
        }
        let perm = kernels::shuffle_permutation(c, groups);
        let y = kernels::permute_channels(self.value(x).data(), n, c, h * w, &perm);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[n, c, h, w], y)?, Op::Permute { x, perm }, rg))
    }

    pub fn max_pool(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let win = Window::new(k, stride, pad);
        let (oh, ow) = win.conv_out(h, w).ok_or_else(|| Error::Shape("max_pool: empty output".into()))?;
        let (y, arg) = kernels::max_pool_forward(self.value(x).data(), n, c, h, w, win, oh, ow);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[n, c, oh, ow], y)?, Op::MaxPool { x, arg }, rg))
    }

    pub fn avg_pool(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let win = Window::new(k, stride, pad);
        let (oh, ow) = win.conv_out(h, w).ok_or_else(|| Error::Shape("avg_pool: empty output".into()))?;
        let y = kernels::avg_pool_forward(self.value(x).data(), n, c, h, w, win, oh, ow);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[n, c, oh, ow], y)?, Op::AvgPool { x, win }, rg))
    }

    /// Class-weighted softmax cross entropy averaged over non-ignored pixels.
    ///
    /// `targets` holds one label per pixel in `[n, h, w]` order. If every
    /// pixel is ignored the loss is zero and [`Graph::ce_all_ignored`] is set.
    pub fn weighted_cross_entropy(&mut self, logits: Var, targets: &[u8], weights: &[f64]) -> Result<Var> {
        let (n, k, h, w) = self.value(logits).dims4()?;
        let plane = h * w;
        if targets.len() != n * plane {
            return Err(Error::Shape(format!("{} targets for {n}x{h}x{w} logits", targets.len())));
        }
        if weights.len() != k || weights.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::Argument(format!("need {k} finite non-negative class weights, got {weights:?}")));
        }
        let ld = self.value(logits).data();
        let mut probs = vec![0.0; ld.len()];
        let mut count = 0usize;
        let mut total = 0.0;
        let mut row = vec![0.0; k];
        for i in 0..n {
            for p in 0..plane {
                let y = targets[i * plane + p];
                if y == IGNORE_LABEL {
                    continue;
                }
                if y as usize >= k {
                    return Err(Error::Argument(format!("target label {y} outside 0..{k}")));
                }
                let mut mx = f64::NEG_INFINITY;
                for (c, r) in row.iter_mut().enumerate() {
                    *r = ld[(i * k + c) * plane + p];
                    mx = mx.max(*r);
                }
                let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
                let lse = mx + z.ln();
                for (c, r) in row.iter().enumerate() {
                    probs[(i * k + c) * plane + p] = (r - lse).exp();
                }
                total += weights[y as usize] * (lse - row[y as usize]);
                count += 1;
            }
        }
        let loss = if count == 0 {
            self.ce_all_ignored = true;
            0.0
        } else {
            total / count as f64
        };
        let coef: Vec<f64> = if count == 0 {
            vec![0.0; k]
        } else {
            weights.iter().map(|wk| wk / count as f64).collect()
        };
        let rg = self.rg(logits);
        let op = Op::WeightedCe { logits, coef, probs, targets: targets.to_vec() };
        Ok(self.push(Tensor::scalar(loss), op, rg))
    }

    /// `sum(x ⊙ r)`, used to project a tensor onto a scalar.
    pub fn dot(&mut self, x: Var, r: Tensor) -> Result<Var> {
        if self.shape(x) != r.shape() {
            return Err(Error::Shape(format!("dot: {:?} vs {:?}", self.shape(x), r.shape())));
        }
        let s: f64 = self.value(x).data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::Dot { x, r }, rg))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!("backward needs a scalar, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, &dy, &mut grads)?;
            grads[i] = Some(dy);
        }
        Ok(Gradients { grads, params: self.params.clone() })
    }

    fn backprop_node(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let acc = |v: Var, g: Tensor, grads: &mut [Option<Tensor>]| {
            if !self.rg(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, dims } => {
                let (dx, dw, db) = kernels::conv2d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    dy.data(),
                    dims,
                    self.rg(*x),
                );
                if let Some(dx) = dx {
                    acc(*x, Tensor::new(self.shape(*x), dx)?, grads);
                }
                acc(*w, Tensor::new(self.shape(*w), dw)?, grads);
                if let Some(b) = b {
                    acc(*b, Tensor::new(self.shape(*b), db)?, grads);
                }
            }
            Op::ConvT2d { x, w, b, dims } => {
                let (dx, dw, db) = kernels::conv_transpose2d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    dy.data(),
                    dims,
                    self.rg(*x),
                );
                if let Some(dx) = dx {
                    acc(*x, Tensor::new(self.shape(*x), dx)?, grads);
                }
                acc(*w, Tensor::new(self.shape(*w), dw)?, grads);
                if let Some(b) = b {
                    acc(*b, Tensor::new(self.shape(*b), db)?, grads);
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let plane = h * w;
                let m = (n * plane) as f64;
                let g = self.value(*gamma).data();
                let dyd = dy.data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for i in 0..n {
                    for ch in 0..c {
                        let off = (i * c + ch) * plane;
                        for k in off..off + plane {
                            dgamma[ch] += dyd[k] * xhat[k];
                            dbeta[ch] += dyd[k];
                        }
                    }
                }
                if self.rg(*x) {
                    let mut dx = vec![0.0; dyd.len()];
                    for i in 0..n {
                        for ch in 0..c {
                            let off = (i * c + ch) * plane;
                            for k in off..off + plane {
                                dx[k] = if self.training {
                                    g[ch] * inv_std[ch] / m * (m * dyd[k] - dbeta[ch] - xhat[k] * dgamma[ch])
                                } else {
                                    g[ch] * inv_std[ch] * dyd[k]
                                };
                            }
                        }
                    }
                    acc(*x, Tensor::new(&[n, c, h, w], dx)?, grads);
                }
                acc(*gamma, Tensor::new(self.shape(*gamma), dgamma)?, grads);
                acc(*beta, Tensor::new(self.shape(*beta), dbeta)?, grads);
            }
            Op::Relu(x) => {
                let g = node.value.zip_map(dy, |y, d| if y > 0.0 { d } else { 0.0 })?;
                acc(*x, g, grads);
            }
            Op::Sigmoid(x) => {
                let g = node.value.zip_map(dy, |y, d| d * y * (1.0 - y))?;
                acc(*x, g, grads);
            }
            Op::Tanh(x) => {
                let g = node.value.zip_map(dy, |y, d| d * (1.0 - y * y))?;
                acc(*x, g, grads);
            }
            Op::Add(a, b) => {
                acc(*a, dy.clone(), grads);
                acc(*b, dy.clone(), grads);
            }
            Op::Sub(a, b) => {
                acc(*a, dy.clone(), grads);
                acc(*b, dy.map(|v| -v), grads);
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    acc(*a, dy.zip_map(self.value(*b), |d, q| d * q)?, grads);
                }
                if self.rg(*b) {
                    acc(*b, dy.zip_map(self.value(*a), |d, p| d * p)?, grads);
                }
            }
            Op::Scale(x, s) => acc(*x, dy.map(|v| v * s), grads),
            Op::OneMinus(x) => acc(*x, dy.map(|v| -v), grads),
            Op::Concat { inputs, channels } => {
                let (n, c, h, w) = dy.dims4()?;
                let plane = h * w;
                let mut start = 0;
                for (&v, &vc) in inputs.iter().zip(channels) {
                    if self.rg(v) {
                        let mut g = Vec::with_capacity(n * vc * plane);
                        for i in 0..n {
                            let off = (i * c + start) * plane;
                            g.extend_from_slice(&dy.data()[off..off + vc * plane]);
                        }
                        acc(v, Tensor::new(&[n, vc, h, w], g)?, grads);
                    }
                    start += vc;
                }
            }
            Op::Slice { x, start, c_in } => {
                let (n, len, h, w) = dy.dims4()?;
                let plane = h * w;
                let mut g = vec![0.0; n * c_in * plane];
                for i in 0..n {
                    let dst = (i * c_in + start) * plane;
                    let src = i * len * plane;
                    g[dst..dst + len * plane].copy_from_slice(&dy.data()[src..src + len * plane]);
                }
                acc(*x, Tensor::new(&[n, *c_in, h, w], g)?, grads);
            }
            Op::Permute { x, perm } => {
                let (n, c, h, w) = dy.dims4()?;
                let mut inverse = vec![0; c];
                for (o, &src) in perm.iter().enumerate() {
                    inverse[src] = o;
                }
                let g = kernels::permute_channels(dy.data(), n, c, h * w, &inverse);
                acc(*x, Tensor::new(&[n, c, h, w], g)?, grads);
            }
            Op::MaxPool { x, arg } => {
                let mut g = vec![0.0; self.value(*x).len()];
                for (o, &src) in arg.iter().enumerate() {
                    g[src] += dy.data()[o];
                }
                acc(*x, Tensor::new(self.shape(*x), g)?, grads);
            }
            Op::AvgPool { x, win } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let (_, _, oh, ow) = dy.dims4()?;
                let g = kernels::avg_pool_backward(dy.data(), n, c, h, w, *win, oh, ow);
                acc(*x, Tensor::new(&[n, c, h, w], g)?, grads);
            }
            Op::WeightedCe { logits, coef, probs, targets } => {
                let (n, k, h, w) = self.value(*logits).dims4()?;
                let plane = h * w;
                let s = dy.data()[0];
                let mut g = vec![0.0; probs.len()];
                for i in 0..n {
                    for p in 0..plane {
                        let y = targets[i * plane + p];
                        if y == IGNORE_LABEL {
                            continue;
                        }
                        let cw = s * coef[y as usize];
                        for c in 0..k {
                            let idx = (i * k + c) * plane + p;
                            let onehot = if c == y as usize { 1.0 } else { 0.0 };
                            g[idx] = cw * (probs[idx] - onehot);
                        }
                    }
                }
                acc(*logits, Tensor::new(&[n, k, h, w], g)?, grads);
            }
            Op::Dot { x, r } => {
                let s = dy.data()[0];
                acc(*x, r.map(|v| v * s), grads);
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
