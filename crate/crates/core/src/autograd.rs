//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation eagerly; [`Graph::backward`] walks the
//! tape in reverse from a scalar node. Nodes that depend only on constants are
//! skipped during the backward pass.

use crate::error::{CoreError, Result};
use crate::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, Tensor};
use crate::wkv::{self, Segment};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Geometry of a 2-D convolution over a `[h * w, cin]` token matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    /// Source pixel for output `(oy, ox)` and tap `(ky, kx)`, if inside the image.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let y = (oy * self.stride + ky) as isize - self.pad as isize;
        let x = (ox * self.stride + kx) as isize - self.pad as isize;
        if y < 0 || x < 0 || y >= self.height as isize || x >= self.width as isize {
            None
        } else {
            Some(y as usize * self.width + x as usize)
        }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: f64 },
    ScaleCols { x: Var, s: Var },
    AddRow { x: Var, b: Var },
    ScaleRows { x: Var, s: Var },
    Sigmoid(Var),
    SqRelu(Var),
    Gelu(Var),
    LayerNorm { x: Var, scale: Var, offset: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    DepthwiseConv { x: Var, kernel: Var, geom: ConvGeom },
    Conv2d { x: Var, weight: Var, geom: ConvGeom },
    GatherRows { x: Var, index: Vec<usize> },
    ConcatRows(Var, Var),
    SoftmaxRows(Var),
    MeanRows(Var),
    GaWkv { k: Var, v: Var, w: Var, u: Var, segments: Vec<Segment>, log_den: Vec<f64> },
    GumbelSoftmax { s: Var, soft: Vec<f64>, tau: f64 },
    CrossEntropy { logits: Var, label: usize, probs: Vec<f64> },
    Dot { x: Var, weights: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Layer-norm variance guard.
pub const LN_EPS: f64 = 1e-5;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(CoreError::shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let th = inner.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, k, m) = (av.rows(), av.cols(), bv.rows());
        if bv.cols() != k {
            return Err(CoreError::shape(format!(
                "matmul_nt [{n}, {k}] x [{m}, {}]ᵀ",
                bv.cols()
            )));
        }
        let mut out = vec![0.0; n * m];
        matmul_nt_into(av.data(), bv.data(), &mut out, n, k, m);
        let out = Tensor::matrix(n, m, out)?;
        Ok(self.push(out, Op::MatMulNT(a, b), &[a, b]))
    }

    fn zip_op(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(av, bv, what)?;
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_op(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_op(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_op(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        self.push(out, Op::Affine { x, scale }, &[x])
    }

    /// Per-channel scale: `x[n, c] * s[c]`.
    pub fn scale_cols(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xv, sv) = (self.value(x), self.value(s));
        let c = xv.cols();
        if sv.len() != c {
            return Err(CoreError::shape(format!("scale_cols: {c} channels vs {}", sv.len())));
        }
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * sv.data()[i % c])
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(out, Op::ScaleCols { x, s }, &[x, s]))
    }

    /// Row-broadcast bias: `x[n, c] + b[c]`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let c = xv.cols();
        if bv.len() != c {
            return Err(CoreError::shape(format!("add_row: {c} channels vs {}", bv.len())));
        }
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bv.data()[i % c])
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddRow { x, b }, &[x, b]))
    }

    /// Per-row weight: `x[n, c] * s[n]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xv, sv) = (self.value(x), self.value(s));
        let (n, c) = (xv.rows(), xv.cols());
        if sv.len() != n {
            return Err(CoreError::shape(format!("scale_rows: {n} rows vs {}", sv.len())));
        }
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * sv.data()[i / c])
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(out, Op::ScaleRows { x, s }, &[x, s]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    /// Squared ReLU, `max(x, 0)²`.
    pub fn sq_relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v * v } else { 0.0 });
        self.push(out, Op::SqRelu(x), &[x])
    }

    /// GELU (tanh approximation).
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        self.push(out, Op::Gelu(x), &[x])
    }

    /// Per-row standardization over columns followed by `scale`/`offset`.
    pub fn layer_norm(&mut self, x: Var, scale: Var, offset: Var) -> Result<Var> {
        let (xv, sv, ov) = (self.value(x), self.value(scale), self.value(offset));
        let (n, c) = (xv.rows(), xv.cols());
        if sv.len() != c || ov.len() != c {
            return Err(CoreError::shape(format!(
                "layer_norm over {c} channels with scale {} / offset {}",
                sv.len(),
                ov.len()
            )));
        }
        let mut xhat = vec![0.0; n * c];
        let mut rstd = vec![0.0; n];
        let mut out = vec![0.0; n * c];
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * sv.data()[j] + ov.data()[j];
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                scale,
                offset,
                xhat,
                rstd,
            },
            &[x, scale, offset],
        ))
    }

    /// Per-channel `k × k` convolution (stride 1, zero padding `k / 2`) over a
    /// `[h * w, c]` token matrix. `kernel` is `[c, k * k]`.
    pub fn depthwise_conv(&mut self, x: Var, kernel: Var, height: usize, width: usize) -> Result<Var> {
        let (xv, kv) = (self.value(x), self.value(kernel));
        let c = xv.cols();
        if xv.rows() != height * width {
            return Err(CoreError::shape(format!(
                "depthwise_conv: {} tokens cannot form {height}x{width}",
                xv.rows()
            )));
        }
        let taps = kv.cols();
        let k = (taps as f64).sqrt().round() as usize;
        if kv.rows() != c || k * k != taps || k % 2 == 0 {
            return Err(CoreError::shape(format!(
                "depthwise kernel {:?} for {c} channels",
                kv.shape()
            )));
        }
        let geom = ConvGeom {
            height,
            width,
            kernel: k,
            stride: 1,
            pad: k / 2,
        };
        let mut out = vec![0.0; height * width * c];
        let (xd, kd) = (xv.data(), kv.data());
        for oy in 0..height {
            for ox in 0..width {
                let o = (oy * width + ox) * c;
                for ky in 0..k {
                    for kx in 0..k {
                        if let Some(src) = geom.source(oy, ox, ky, kx) {
                            let tap = ky * k + kx;
                            for ch in 0..c {
                                out[o + ch] += kd[ch * taps + tap] * xd[src * c + ch];
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::matrix(height * width, c, out)?;
        Ok(self.push(out, Op::DepthwiseConv { x, kernel, geom }, &[x, kernel]))
    }

    /// Dense 2-D convolution over a `[h * w, cin]` token matrix. `weight` is
    /// `[cout, cin * k * k]` indexed `(ci * k + ky) * k + kx`.
    pub fn conv2d(&mut self, x: Var, weight: Var, geom: ConvGeom) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(weight));
        let cin = xv.cols();
        let k = geom.kernel;
        if xv.rows() != geom.height * geom.width {
            return Err(CoreError::shape(format!(
                "conv2d: {} tokens cannot form {}x{}",
                xv.rows(),
                geom.height,
                geom.width
            )));
        }
        if wv.cols() != cin * k * k {
            return Err(CoreError::shape(format!(
                "conv2d weight {:?} for {cin} input channels, kernel {k}",
                wv.shape()
            )));
        }
        if geom.height + 2 * geom.pad < k || geom.width + 2 * geom.pad < k || geom.stride == 0 {
            return Err(CoreError::shape("conv2d kernel larger than padded input"));
        }
        let cout = wv.rows();
        let (oh, ow) = (geom.out_height(), geom.out_width());
        let mut out = vec![0.0; oh * ow * cout];
        let (xd, wd) = (xv.data(), wv.data());
        let row_len = cin * k * k;
        for oy in 0..oh {
            for ox in 0..ow {
                let o = (oy * ow + ox) * cout;
                for ky in 0..k {
                    for kx in 0..k {
                        let Some(src) = geom.source(oy, ox, ky, kx) else {
                            continue;
                        };
                        let xs = &xd[src * cin..(src + 1) * cin];
                        for co in 0..cout {
                            let wrow = &wd[co * row_len..(co + 1) * row_len];
                            let mut acc = 0.0;
                            for (ci, xval) in xs.iter().enumerate() {
                                acc += wrow[(ci * k + ky) * k + kx] * xval;
                            }
                            out[o + co] += acc;
                        }
                    }
                }
            }
        }
        let out = Tensor::matrix(oh * ow, cout, out)?;
        Ok(self.push(out, Op::Conv2d { x, weight, geom }, &[x, weight]))
    }

    /// `out[i] = x[index[i]]` row-wise.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (n, c) = (xv.rows(), xv.cols());
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index {
            if i >= n {
                return Err(CoreError::shape(format!("gather index {i} out of {n} rows")));
            }
            out.extend_from_slice(xv.row(i));
        }
        let out = Tensor::matrix(index.len(), c, out)?;
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            &[x],
        ))
    }

    /// Stacks the rows of `a` above the rows of `b`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(CoreError::shape(format!(
                "concat_rows: {} vs {} columns",
                av.cols(),
                bv.cols()
            )));
        }
        let mut data = av.data().to_vec();
        data.extend_from_slice(bv.data());
        let out = Tensor::matrix(av.rows() + bv.rows(), av.cols(), data)?;
        Ok(self.push(out, Op::ConcatRows(a, b), &[a, b]))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c) = (xv.rows(), xv.cols());
        let mut out = vec![0.0; n * c];
        for r in 0..n {
            softmax_into(xv.row(r), &mut out[r * c..(r + 1) * c]);
        }
        let out = Tensor::new(xv.shape().to_vec(), out).expect("same shape");
        self.push(out, Op::SoftmaxRows(x), &[x])
    }

    /// Column means, `[n, c] -> [1, c]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c) = (xv.rows(), xv.cols());
        let mut out = vec![0.0; c];
        for r in 0..n {
            for (o, v) in out.iter_mut().zip(xv.row(r)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        let out = Tensor::matrix(1, c, out).expect("shape");
        self.push(out, Op::MeanRows(x), &[x])
    }

    /// Ga-WKV attention; see [`crate::wkv`].
    pub fn ga_wkv(&mut self, k: Var, v: Var, w: Var, u: Var, segments: &[Segment]) -> Result<Var> {
        let (out, log_den) = wkv::forward(self.value(k), self.value(v), self.value(w), self.value(u), segments)?;
        Ok(self.push(
            out,
            Op::GaWkv {
                k,
                v,
                w,
                u,
                segments: segments.to_vec(),
                log_den,
            },
            &[k, v, w, u],
        ))
    }

    /// `softmax((s + noise) / tau)`; with `hard` the forward value is the
    /// multi-hot of the `top_k` largest entries while gradients follow the
    /// soft distribution.
    pub fn gumbel_softmax(&mut self, s: Var, noise: &[f64], tau: f64, hard: bool, top_k: usize) -> Result<Var> {
        let sv = self.value(s);
        if noise.len() != sv.len() {
            return Err(CoreError::shape(format!(
                "gumbel noise has {} entries for {} scores",
                noise.len(),
                sv.len()
            )));
        }
        let soft = crate::partition::gumbel_soft(sv.data(), noise, tau)?;
        let value = if hard {
            let mut hot = vec![0.0; soft.len()];
            for i in crate::partition::topk_select(&soft, top_k)? {
                hot[i] = 1.0;
            }
            hot
        } else {
            soft.clone()
        };
        let out = Tensor::new(sv.shape().to_vec(), value)?;
        Ok(self.push(out, Op::GumbelSoftmax { s, soft, tau }, &[s]))
    }

    /// Softmax cross-entropy of a single logit row against `label`.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let lv = self.value(logits);
        if label >= lv.len() {
            return Err(CoreError::shape(format!(
                "label {label} out of {} classes",
                lv.len()
            )));
        }
        let mut probs = vec![0.0; lv.len()];
        softmax_into(lv.data(), &mut probs);
        let max = lv.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + lv.data().iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        let loss = lse - lv.data()[label];
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                label,
                probs,
            },
            &[logits],
        ))
    }

    /// Scalar `Σ weights ⊙ x`.
    pub fn dot(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        let xv = self.value(x);
        if weights.len() != xv.len() {
            return Err(CoreError::shape(format!(
                "dot: {} weights for {} values",
                weights.len(),
                xv.len()
            )));
        }
        let s = xv.data().iter().zip(weights).map(|(a, b)| a * b).sum();
        Ok(self.push(
            Tensor::scalar(s),
            Op::Dot {
                x,
                weights: weights.to_vec(),
            },
            &[x],
        ))
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(CoreError::shape("backward needs a scalar loss"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k, m) = (av.rows(), av.cols(), bv.cols());
                if self.wants(*a) {
                    let mut da = vec![0.0; n * k];
                    matmul_nt_into(gd, bv.data(), &mut da, n, m, k);
                    self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), da).expect("shape"));
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * m];
                    matmul_tn_into(av.data(), gd, &mut db, n, k, m);
                    self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), db).expect("shape"));
                }
            }
            Op::MatMulNT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k, m) = (av.rows(), av.cols(), bv.rows());
                if self.wants(*a) {
                    let mut da = vec![0.0; n * k];
                    matmul_into(gd, bv.data(), &mut da, n, m, k);
                    self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), da).expect("shape"));
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; m * k];
                    matmul_tn_into(gd, av.data(), &mut db, n, m, k);
                    self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), db).expect("shape"));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = gd.iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), d).expect("shape"));
                }
                if self.wants(*b) {
                    let d = gd.iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), d).expect("shape"));
                }
            }
            Op::Affine { x, scale } => {
                self.accumulate(grads, *x, g.map(|v| v * scale));
            }
            Op::ScaleCols { x, s } => {
                let (xv, sv) = (self.value(*x), self.value(*s));
                let c = xv.cols();
                if self.wants(*x) {
                    let d = gd.iter().enumerate().map(|(i, v)| v * sv.data()[i % c]).collect();
                    self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), d).expect("shape"));
                }
                if self.wants(*s) {
                    let mut ds = vec![0.0; c];
                    for (i, (gv, xv)) in gd.iter().zip(xv.data()).enumerate() {
                        ds[i % c] += gv * xv;
                    }
                    self.accumulate(grads, *s, Tensor::new(sv.shape().to_vec(), ds).expect("shape"));
                }
            }
            Op::AddRow { x, b } => {
                let bv = self.value(*b);
                let c = bv.len();
                self.accumulate(grads, *x, g.clone());
                if self.wants(*b) {
                    let mut db = vec![0.0; c];
                    for (i, gv) in gd.iter().enumerate() {
                        db[i % c] += gv;
                    }
                    self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), db).expect("shape"));
                }
            }
            Op::ScaleRows { x, s } => {
                let (xv, sv) = (self.value(*x), self.value(*s));
                let c = xv.cols();
                if self.wants(*x) {
                    let d = gd.iter().enumerate().map(|(i, v)| v * sv.data()[i / c]).collect();
                    self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), d).expect("shape"));
                }
                if self.wants(*s) {
                    let mut ds = vec![0.0; sv.len()];
                    for (i, (gv, xv)) in gd.iter().zip(xv.data()).enumerate() {
                        ds[i / c] += gv * xv;
                    }
                    self.accumulate(grads, *s, Tensor::new(sv.shape().to_vec(), ds).expect("shape"));
                }
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                let d = gd.iter().zip(y.data()).map(|(gv, yv)| gv * yv * (1.0 - yv)).collect();
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), d).expect("shape"));
            }
            Op::SqRelu(x) => {
                let xv = self.value(*x);
                let d = gd
                    .iter()
                    .zip(xv.data())
                    .map(|(gv, v)| if *v > 0.0 { 2.0 * v * gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), d).expect("shape"));
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let d = gd.iter().zip(xv.data()).map(|(gv, v)| gv * gelu_grad(*v)).collect();
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), d).expect("shape"));
            }
            Op::LayerNorm {
                x,
                scale,
                offset,
                xhat,
                rstd,
            } => {
                let sv = self.value(*scale);
                let c = sv.len();
                let n = rstd.len();
                if self.wants(*scale) {
                    let mut ds = vec![0.0; c];
                    for (i, gv) in gd.iter().enumerate() {
                        ds[i % c] += gv * xhat[i];
                    }
                    self.accumulate(grads, *scale, Tensor::new(sv.shape().to_vec(), ds).expect("shape"));
                }
                if self.wants(*offset) {
                    let mut db = vec![0.0; c];
                    for (i, gv) in gd.iter().enumerate() {
                        db[i % c] += gv;
                    }
                    let ov = self.value(*offset);
                    self.accumulate(grads, *offset, Tensor::new(ov.shape().to_vec(), db).expect("shape"));
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; n * c];
                    for r in 0..n {
                        let base = r * c;
                        let mut mean_gh = 0.0;
                        let mut mean_gh_h = 0.0;
                        for j in 0..c {
                            let gh = gd[base + j] * sv.data()[j];
                            mean_gh += gh;
                            mean_gh_h += gh * xhat[base + j];
                        }
                        mean_gh /= c as f64;
                        mean_gh_h /= c as f64;
                        for j in 0..c {
                            let gh = gd[base + j] * sv.data()[j];
                            dx[base + j] = rstd[r] * (gh - mean_gh - xhat[base + j] * mean_gh_h);
                        }
                    }
                    let xv = self.value(*x);
                    self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx).expect("shape"));
                }
            }
            Op::DepthwiseConv { x, kernel, geom } => {
                let (xv, kv) = (self.value(*x), self.value(*kernel));
                let c = xv.cols();
                let k = geom.kernel;
                let taps = k * k;
                let mut dx = vec![0.0; xv.len()];
                let mut dk = vec![0.0; kv.len()];
                let (xd, kd) = (xv.data(), kv.data());
                for oy in 0..geom.height {
                    for ox in 0..geom.width {
                        let o = (oy * geom.width + ox) * c;
                        for ky in 0..k {
                            for kx in 0..k {
                                if let Some(src) = geom.source(oy, ox, ky, kx) {
                                    let tap = ky * k + kx;
                                    for ch in 0..c {
                                        dx[src * c + ch] += kd[ch * taps + tap] * gd[o + ch];
                                        dk[ch * taps + tap] += xd[src * c + ch] * gd[o + ch];
                                    }
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx).expect("shape"));
                self.accumulate(grads, *kernel, Tensor::new(kv.shape().to_vec(), dk).expect("shape"));
            }
            Op::Conv2d { x, weight, geom } => {
                let (xv, wv) = (self.value(*x), self.value(*weight));
                let cin = xv.cols();
                let cout = wv.rows();
                let k = geom.kernel;
                let row_len = cin * k * k;
                let (oh, ow) = (geom.out_height(), geom.out_width());
                let mut dx = vec![0.0; xv.len()];
                let mut dw = vec![0.0; wv.len()];
                let (xd, wd) = (xv.data(), wv.data());
                let want_x = self.wants(*x);
                for oy in 0..oh {
                    for ox in 0..ow {
                        let o = (oy * ow + ox) * cout;
                        for ky in 0..k {
                            for kx in 0..k {
                                let Some(src) = geom.source(oy, ox, ky, kx) else {
                                    continue;
                                };
                                for co in 0..cout {
                                    let go = gd[o + co];
                                    if go == 0.0 {
                                        continue;
                                    }
                                    let wbase = co * row_len;
                                    for ci in 0..cin {
                                        let widx = wbase + (ci * k + ky) * k + kx;
                                        dw[widx] += go * xd[src * cin + ci];
                                        if want_x {
                                            dx[src * cin + ci] += go * wd[widx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx).expect("shape"));
                self.accumulate(grads, *weight, Tensor::new(wv.shape().to_vec(), dw).expect("shape"));
            }
            Op::GatherRows { x, index } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut dx = vec![0.0; xv.len()];
                for (i, &src) in index.iter().enumerate() {
                    for j in 0..c {
                        dx[src * c + j] += gd[i * c + j];
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx).expect("shape"));
            }
            Op::ConcatRows(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let split = av.len();
                self.accumulate(
                    grads,
                    *a,
                    Tensor::new(av.shape().to_vec(), gd[..split].to_vec()).expect("shape"),
                );
                self.accumulate(
                    grads,
                    *b,
                    Tensor::new(bv.shape().to_vec(), gd[split..].to_vec()).expect("shape"),
                );
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let (n, c) = (y.rows(), y.cols());
                let mut dx = vec![0.0; n * c];
                for r in 0..n {
                    let yr = y.row(r);
                    let gr = &gd[r * c..(r + 1) * c];
                    let dotp: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[r * c + j] = yr[j] * (gr[j] - dotp);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), dx).expect("shape"));
            }
            Op::MeanRows(x) => {
                let xv = self.value(*x);
                let (n, c) = (xv.rows(), xv.cols());
                let mut dx = vec![0.0; n * c];
                for r in 0..n {
                    for j in 0..c {
                        dx[r * c + j] = gd[j] / n as f64;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx).expect("shape"));
            }
            Op::GaWkv {
                k,
                v,
                w,
                u,
                segments,
                log_den,
            } => {
                let gr = wkv::backward(
                    self.value(*k),
                    self.value(*v),
                    self.value(*w),
                    self.value(*u),
                    segments,
                    &node.value,
                    log_den,
                    g,
                );
                self.accumulate(grads, *k, gr.k);
                self.accumulate(grads, *v, gr.v);
                self.accumulate(grads, *w, gr.w);
                self.accumulate(grads, *u, gr.u);
            }
            Op::GumbelSoftmax { s, soft, tau } => {
                let dotp: f64 = soft.iter().zip(gd).map(|(a, b)| a * b).sum();
                let d = soft
                    .iter()
                    .zip(gd)
                    .map(|(p, gv)| p * (gv - dotp) / tau)
                    .collect();
                let sv = self.value(*s);
                self.accumulate(grads, *s, Tensor::new(sv.shape().to_vec(), d).expect("shape"));
            }
            Op::CrossEntropy {
                logits,
                label,
                probs,
            } => {
                let lv = self.value(*logits);
                let d = probs
                    .iter()
                    .enumerate()
                    .map(|(i, p)| gd[0] * (p - if i == *label { 1.0 } else { 0.0 }))
                    .collect();
                self.accumulate(grads, *logits, Tensor::new(lv.shape().to_vec(), d).expect("shape"));
            }
            Op::Dot { x, weights } => {
                let xv = self.value(*x);
                let d = weights.iter().map(|w| w * gd[0]).collect();
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), d).expect("shape"));
            }
        }
    }
}

pub(crate) fn softmax_into(x: &[f64], out: &mut [f64]) {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{check_gradient, GradCheck};

    fn seeded(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut state = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
        Tensor::from_fn(rows, cols, |_, _| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state % 10_000) as f64 / 5_000.0 - 1.0
        })
    }

    fn check(inputs: Vec<Tensor>, build: impl Fn(&mut Graph, &[Var]) -> Result<Var>) {
        let report = check_gradient(&inputs, &build, GradCheck::f64_default()).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn matmul_and_transposed_gradients() {
        check(vec![seeded(3, 4, 1), seeded(4, 2, 2)], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            g.dot(y, &[0.3, -1.0, 0.5, 2.0, -0.7, 1.1])
        });
        check(vec![seeded(3, 4, 3), seeded(2, 4, 4)], |g, v| {
            let y = g.matmul_nt(v[0], v[1])?;
            let s = g.sigmoid(y);
            g.dot(s, &[0.3, -1.0, 0.5, 2.0, -0.7, 1.1])
        });
    }

    #[test]
    fn elementwise_and_broadcast_gradients() {
        check(
            vec![seeded(3, 2, 5), seeded(3, 2, 6), seeded(1, 2, 7), seeded(3, 1, 8)],
            |g, v| {
                let a = g.mul(v[0], v[1])?;
                let b = g.sub(a, v[1])?;
                let c = g.scale_cols(b, v[2])?;
                let d = g.add_row(c, v[2])?;
                let e = g.scale_rows(d, v[3])?;
                let f = g.gelu(e);
                let h = g.sq_relu(f);
                let k = g.affine(h, -2.0, 0.5);
                let m = g.add(k, v[0])?;
                g.dot(m, &[1.0, -0.5, 0.25, 2.0, -1.5, 0.75])
            },
        );
    }

    #[test]
    fn layer_norm_gradient() {
        check(vec![seeded(4, 5, 9), seeded(1, 5, 10), seeded(1, 5, 11)], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2])?;
            let w: Vec<f64> = (0..20).map(|i| (i as f64 * 0.37).sin()).collect();
            g.dot(y, &w)
        });
    }

    #[test]
    fn convolution_gradients() {
        check(vec![seeded(16, 3, 12), seeded(3, 9, 13)], |g, v| {
            let y = g.depthwise_conv(v[0], v[1], 4, 4)?;
            let w: Vec<f64> = (0..48).map(|i| (i as f64 * 0.11).cos()).collect();
            g.dot(y, &w)
        });
        let geom = ConvGeom {
            height: 5,
            width: 4,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        check(vec![seeded(20, 2, 14), seeded(3, 18, 15)], move |g, v| {
            let y = g.conv2d(v[0], v[1], geom)?;
            let n = g.value(y).len();
            let w: Vec<f64> = (0..n).map(|i| (i as f64 * 0.23).sin()).collect();
            g.dot(y, &w)
        });
    }

    #[test]
    fn gather_concat_softmax_mean_gradients() {
        check(vec![seeded(4, 3, 16), seeded(2, 3, 17)], |g, v| {
            let a = g.gather_rows(v[0], &[3, 0, 0, 2])?;
            let b = g.concat_rows(a, v[1])?;
            let s = g.softmax_rows(b);
            let m = g.mean_rows(s);
            let logits = g.mul(m, m)?;
            g.cross_entropy(logits, 1)
        });
    }

    #[test]
    fn conv_output_shape() {
        let geom = ConvGeom {
            height: 224,
            width: 224,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        assert_eq!((geom.out_height(), geom.out_width()), (112, 112));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        let b = g.constant(Tensor::vector(vec![3.0, 4.0]));
        let c = g.mul(a, b).unwrap();
        let l = g.dot(c, &[1.0, 1.0]).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[3.0, 4.0]);
        assert!(grads.get(b).is_none());
    }
}
