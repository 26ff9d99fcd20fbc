//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only tape of nodes. Every operation appends its
//! output after its inputs, so node order is a topological order and the
//! backward pass is a single reverse sweep. A fresh graph is built for every
//! forward pass.

use crate::error::{RamError, Result};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel statistics of a training-mode batch normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (divide by count) variance.
    pub var: Vec<f64>,
    /// Number of values each channel statistic was computed from.
    pub count: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        factor: f64,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Sum {
        a: Var,
    },
    Combine {
        terms: Vec<(Var, f64)>,
    },
    Reshape {
        a: Var,
    },
    Slice {
        a: Var,
        axis: usize,
        start: usize,
    },
    Relu {
        a: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        padding: usize,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        labels: Vec<Option<usize>>,
        count: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Output extent of a strided window sweep, `None` if the window never fits.
pub fn window_output_len(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if kernel == 0 || stride == 0 || input + 2 * padding < kernel {
        return None;
    }
    Some((input + 2 * padding - kernel) / stride + 1)
}

/// Output positions `[lo, hi)` whose tap at kernel offset `k_off` lands inside the input.
fn valid_range(k_off: usize, padding: usize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let lo = if padding > k_off {
        (padding - k_off).div_ceil(stride)
    } else {
        0
    };
    let hi = if in_len + padding > k_off {
        ((in_len - 1 + padding - k_off) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

fn dims4(shape: &[usize], what: &str) -> Result<[usize; 4]> {
    match shape {
        &[a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(RamError::layer(
            what,
            format!("expected a 4-d tensor, got shape {shape:?}"),
        )),
    }
}

/// Which operand is broadcast: shapes must match, or one must be a suffix of the other.
fn broadcast(op: &str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b {
        return Ok(a.to_vec());
    }
    if a.len() > b.len() && a.ends_with(b) {
        return Ok(a.to_vec());
    }
    if b.len() > a.len() && b.ends_with(a) {
        return Ok(b.to_vec());
    }
    Err(RamError::shape(op, a, b))
}

/// Sums a full-size gradient down to a (suffix-)broadcast operand.
fn reduce_to(grad: Vec<f64>, numel: usize) -> Vec<f64> {
    if grad.len() == numel {
        return grad;
    }
    let mut out = vec![0.0; numel];
    for (i, g) in grad.iter().enumerate() {
        out[i % numel] += g;
    }
    out
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
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

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad matches value"))
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records `op` only when some input needs a gradient; otherwise the
    /// output is a constant and its saved state is dropped.
    fn record(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Var {
        let requires_grad = inputs.iter().any(|&v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.push(value, requires_grad, op)
    }

    fn binary_elementwise(&mut self, name: &str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast(name, ta.shape(), tb.shape())?;
        let (na, nb) = (ta.numel(), tb.numel());
        let n = na.max(nb);
        let data = (0..n)
            .map(|i| f(ta.data()[i % na], tb.data()[i % nb]))
            .collect();
        Tensor::new(shape, data)
    }

    /// Elementwise sum; an operand whose shape is a suffix of the other's is broadcast.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary_elementwise("add", a, b, |x, y| x + y)?;
        Ok(self.record(out, &[a, b], Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary_elementwise("mul", a, b, |x, y| x * y)?;
        Ok(self.record(out, &[a, b], Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * factor).collect())
            .expect("same shape");
        self.record(out, &[a], Op::Scale { a, factor })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = match (ta.shape(), tb.shape()) {
            (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
            (sa, sb) => return Err(RamError::shape("matmul", sa, sb)),
        };
        let (da, db) = (ta.data(), tb.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = da[i * k + p];
                for (o, &bv) in row.iter_mut().zip(&db[p * n..(p + 1) * n]) {
                    *o += av * bv;
                }
            }
        }
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.record(out, &[a, b], Op::MatMul { a, b }))
    }

    /// Fully connected layer: `x (N x in) . w^T (in x out) + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (n, inp, out_dim) = match (tx.shape(), tw.shape()) {
            (&[n, i], &[o, i2]) if i == i2 => (n, i, o),
            (sx, sw) => return Err(RamError::shape("linear", sx, sw)),
        };
        if tb.shape() != [out_dim] {
            return Err(RamError::shape("linear bias", tb.shape(), &[out_dim]));
        }
        let (dx, dw, dbias) = (tx.data(), tw.data(), tb.data());
        let mut out = Vec::with_capacity(n * out_dim);
        for r in 0..n {
            let xr = &dx[r * inp..(r + 1) * inp];
            for o in 0..out_dim {
                let wr = &dw[o * inp..(o + 1) * inp];
                out.push(dbias[o] + xr.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>());
            }
        }
        let out = Tensor::new(vec![n, out_dim], out)?;
        Ok(self.record(out, &[x, w, b], Op::Linear { x, w, b }))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.record(Tensor::scalar(s), &[a], Op::Sum { a })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// `sum_i coeff_i * term_i` over single-element operands.
    pub fn combine(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, c) in terms {
            let value = self
                .value(v)
                .item()
                .ok_or_else(|| RamError::shape("combine", self.shape(v), &[]))?;
            total += c * value;
        }
        let inputs: Vec<Var> = terms.iter().map(|&(v, _)| v).collect();
        Ok(self.record(
            Tensor::scalar(total),
            &inputs,
            Op::Combine {
                terms: terms.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.record(out, &[a], Op::Reshape { a }))
    }

    /// Contiguous range `[start, start + len)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let shape = t.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(RamError::InvalidShape(format!(
                "slice [{start}, {}) on axis {axis} of shape {shape:?}",
                start + len
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let out = Tensor::new(out_shape, data)?;
        Ok(self.record(out, &[a], Op::Slice { a, axis, start }))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| v.max(0.0)).collect())
            .expect("same shape");
        self.record(out, &[a], Op::Relu { a })
    }

    /// 2-D cross-correlation over NCHW input with OIHW weights.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let [n, c, h, wd] = dims4(self.shape(x), "conv2d input")?;
        let [o, wc, kh, kw] = dims4(self.shape(w), "conv2d weight")?;
        if wc != c {
            return Err(RamError::layer(
                "conv2d",
                format!("input has {c} channels but the kernel expects {wc}"),
            ));
        }
        if self.shape(b) != [o] {
            return Err(RamError::shape("conv2d bias", self.shape(b), &[o]));
        }
        let (oh, ow) = match (
            window_output_len(h, kh, stride, padding),
            window_output_len(wd, kw, stride, padding),
        ) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(RamError::layer(
                    "conv2d",
                    format!("kernel {kh}x{kw} (stride {stride}, padding {padding}) does not fit input {h}x{wd}"),
                ))
            }
        };
        let (xd, wdat, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![0.0; n * o * oh * ow];
        for ni in 0..n {
            for oc in 0..o {
                let plane = &mut out[(ni * o + oc) * oh * ow..][..oh * ow];
                plane.fill(bd[oc]);
                for ci in 0..c {
                    let xplane = &xd[(ni * c + ci) * h * wd..][..h * wd];
                    for ki in 0..kh {
                        let (r_lo, r_hi) = valid_range(ki, padding, stride, h, oh);
                        for kj in 0..kw {
                            let (c_lo, c_hi) = valid_range(kj, padding, stride, wd, ow);
                            let wv = wdat[((oc * c + ci) * kh + ki) * kw + kj];
                            for oi in r_lo..r_hi {
                                let ii = oi * stride + ki - padding;
                                let xrow = &xplane[ii * wd..(ii + 1) * wd];
                                let orow = &mut plane[oi * ow..(oi + 1) * ow];
                                for oj in c_lo..c_hi {
                                    orow[oj] += wv * xrow[oj * stride + kj - padding];
                                }
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![n, o, oh, ow], out)?;
        Ok(self.record(
            out,
            &[x, w, b],
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            },
        ))
    }

    /// Max pooling without padding; ties go to the first element in row-major window order.
    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let [n, c, h, w] = dims4(self.shape(x), "max_pool2d input")?;
        let (oh, ow) = match (
            window_output_len(h, kernel, stride, 0),
            window_output_len(w, kernel, stride, 0),
        ) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(RamError::layer(
                    "max_pool2d",
                    format!("window {kernel} (stride {stride}) is larger than input {h}x{w}"),
                ))
            }
        };
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut best = base + oi * stride * w + oj * stride;
                    for ki in 0..kernel {
                        for kj in 0..kernel {
                            let idx = base + (oi * stride + ki) * w + oj * stride + kj;
                            if xd[idx] > xd[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let out = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.record(out, &[x], Op::MaxPool2d { x, argmax }))
    }

    /// Training-mode batch normalization over the N, H, W axes of an NCHW
    /// tensor. Also returns the batch statistics for running-average updates.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let [n, c, h, w] = dims4(self.shape(x), "batch_norm input")?;
        if n < 2 {
            return Err(RamError::layer(
                "batch_norm",
                "training mode needs a batch of at least 2",
            ));
        }
        self.check_channel_param("batch_norm gamma", gamma, c)?;
        self.check_channel_param("batch_norm beta", beta, c)?;
        let hw = h * w;
        let count = n * hw;
        let xd = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for ni in 0..n {
                s += xd[(ni * c + ch) * hw..][..hw].iter().sum::<f64>();
            }
            mean[ch] = s / count as f64;
            let mut v = 0.0;
            for ni in 0..n {
                v += xd[(ni * c + ch) * hw..][..hw]
                    .iter()
                    .map(|&x| (x - mean[ch]).powi(2))
                    .sum::<f64>();
            }
            var[ch] = v / count as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for (i, (&xv, (xh, o))) in xd.iter().zip(xhat.iter_mut().zip(out.iter_mut())).enumerate() {
            let ch = (i / hw) % c;
            *xh = (xv - mean[ch]) * inv_std[ch];
            *o = gd[ch] * *xh + bd[ch];
        }
        let out = Tensor::new(vec![n, c, h, w], out)?;
        let stats = BatchStats { mean, var, count };
        let v = self.record(
            out,
            &[x, gamma, beta],
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        );
        Ok((v, stats))
    }

    /// Inference-mode batch normalization: a fixed per-channel affine map.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let [n, c, h, w] = dims4(self.shape(x), "batch_norm input")?;
        self.check_channel_param("batch_norm gamma", gamma, c)?;
        self.check_channel_param("batch_norm beta", beta, c)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(RamError::layer(
                "batch_norm",
                format!("running statistics do not have {c} channels"),
            ));
        }
        let hw = h * w;
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (xd, gd, bd) = (self.value(x).data(), self.value(gamma).data(), self.value(beta).data());
        let out: Vec<f64> = xd
            .iter()
            .enumerate()
            .map(|(i, &xv)| {
                let ch = (i / hw) % c;
                gd[ch] * (xv - running_mean[ch]) * inv_std[ch] + bd[ch]
            })
            .collect();
        let out = Tensor::new(vec![n, c, h, w], out)?;
        Ok(self.record(
            out,
            &[x, gamma, beta],
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean: running_mean.to_vec(),
                inv_std,
            },
        ))
    }

    fn check_channel_param(&self, what: &str, v: Var, c: usize) -> Result<()> {
        if self.shape(v) != [c] {
            return Err(RamError::shape(what, self.shape(v), &[c]));
        }
        Ok(())
    }

    /// Mean softmax cross-entropy over the labelled rows of `logits (N x C)`.
    /// Rows labelled `None` are masked out; with no labelled rows the loss is 0.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[Option<usize>]) -> Result<Var> {
        let t = self.value(logits);
        let (n, c) = match t.shape() {
            &[n, c] => (n, c),
            s => return Err(RamError::shape("softmax_cross_entropy", s, &[labels.len(), 0])),
        };
        if labels.len() != n {
            return Err(RamError::shape("softmax_cross_entropy labels", t.shape(), &[labels.len()]));
        }
        if let Some(bad) = labels.iter().flatten().find(|&&l| l >= c) {
            return Err(RamError::layer(
                "softmax_cross_entropy",
                format!("label {bad} out of range for {c} classes"),
            ));
        }
        let mut probs = vec![0.0; n * c];
        let mut total = 0.0;
        let mut count = 0;
        for r in 0..n {
            let row = &t.data()[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = row.iter().map(|&z| (z - max).exp()).sum();
            let lse = max + sum_exp.ln();
            for (p, &z) in probs[r * c..(r + 1) * c].iter_mut().zip(row) {
                *p = (z - lse).exp();
            }
            if let Some(l) = labels[r] {
                total += lse - row[l];
                count += 1;
            }
        }
        let loss = if count > 0 { total / count as f64 } else { 0.0 };
        Ok(self.record(
            Tensor::scalar(loss),
            &[logits],
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
                count,
            },
        ))
    }

    /// Reverse sweep from a single-element `loss`. Gradients accumulate
    /// additively into every reachable node that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(RamError::Autograd("backward on an empty graph".into()));
        }
        let numel = self.value(loss).numel();
        if numel != 1 {
            return Err(RamError::Autograd(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.accumulate(loss.0, vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = node.grad.as_deref() else {
                continue;
            };
            let contributions = self.local_grads(i, dy);
            for (target, g) in contributions {
                if self.nodes[target.0].requires_grad {
                    self.accumulate(target.0, g);
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, idx: usize, g: Vec<f64>) {
        let node = &mut self.nodes[idx];
        match &mut node.grad {
            Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, v)| *e += v),
            None => node.grad = Some(g),
        }
    }

    fn local_grads(&self, idx: usize, dy: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[idx];
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add { a, b } => {
                let (na, nb) = (val(*a).len(), val(*b).len());
                vec![(*a, reduce_to(dy.to_vec(), na)), (*b, reduce_to(dy.to_vec(), nb))]
            }
            Op::Mul { a, b } => {
                let (da, db) = (val(*a), val(*b));
                let (na, nb) = (da.len(), db.len());
                let ga = dy.iter().enumerate().map(|(i, g)| g * db[i % nb]).collect();
                let gb = dy.iter().enumerate().map(|(i, g)| g * da[i % na]).collect();
                vec![(*a, reduce_to(ga, na)), (*b, reduce_to(gb, nb))]
            }
            Op::Scale { a, factor } => vec![(*a, dy.iter().map(|g| g * factor).collect())],
            Op::MatMul { a, b } => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let (da, db) = (ta.data(), tb.data());
                let mut ga = vec![0.0; m * k];
                let mut gb = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += dy[i * n + j] * db[p * n + j];
                            gb[p * n + j] += da[i * k + p] * dy[i * n + j];
                        }
                        ga[i * k + p] = acc;
                    }
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
                let (n, inp) = (tx.shape()[0], tx.shape()[1]);
                let out_dim = tw.shape()[0];
                let (dx, dw) = (tx.data(), tw.data());
                let mut gx = vec![0.0; n * inp];
                let mut gw = vec![0.0; out_dim * inp];
                let mut gb = vec![0.0; out_dim];
                for r in 0..n {
                    let xr = &dx[r * inp..(r + 1) * inp];
                    let gxr = &mut gx[r * inp..(r + 1) * inp];
                    for o in 0..out_dim {
                        let g = dy[r * out_dim + o];
                        gb[o] += g;
                        let wr = &dw[o * inp..(o + 1) * inp];
                        let gwr = &mut gw[o * inp..(o + 1) * inp];
                        for i in 0..inp {
                            gxr[i] += g * wr[i];
                            gwr[i] += g * xr[i];
                        }
                    }
                }
                vec![(*x, gx), (*w, gw), (*b, gb)]
            }
            Op::Sum { a } => vec![(*a, vec![dy[0]; val(*a).len()])],
            Op::Combine { terms } => terms.iter().map(|&(v, c)| (v, vec![c * dy[0]])).collect(),
            Op::Reshape { a } => vec![(*a, dy.to_vec())],
            Op::Slice { a, axis, start } => {
                let shape = self.nodes[a.0].value.shape();
                let len = node.value.shape()[*axis];
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let full = shape[*axis];
                let mut ga = vec![0.0; shape.iter().product()];
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    let src = &dy[o * len * inner..(o + 1) * len * inner];
                    ga[base..base + len * inner].copy_from_slice(src);
                }
                vec![(*a, ga)]
            }
            Op::Relu { a } => {
                let da = val(*a);
                vec![(*a, dy.iter().zip(da).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect())]
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            } => self.conv2d_backward(*x, *w, *b, *stride, *padding, node.value.shape(), dy),
            Op::MaxPool2d { x, argmax } => {
                let mut gx = vec![0.0; val(*x).len()];
                for (&src, g) in argmax.iter().zip(dy) {
                    gx[src] += g;
                }
                vec![(*x, gx)]
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let shape = self.nodes[x.0].value.shape();
                let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                let m = (n * hw) as f64;
                let gd = val(*gamma);
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for (i, (&g, &xh)) in dy.iter().zip(xhat).enumerate() {
                    let ch = (i / hw) % c;
                    sum_dy[ch] += g;
                    sum_dy_xhat[ch] += g * xh;
                }
                let gx = dy
                    .iter()
                    .zip(xhat)
                    .enumerate()
                    .map(|(i, (&g, &xh))| {
                        let ch = (i / hw) % c;
                        gd[ch] * inv_std[ch] * (g - sum_dy[ch] / m - xh * sum_dy_xhat[ch] / m)
                    })
                    .collect();
                vec![(*x, gx), (*gamma, sum_dy_xhat), (*beta, sum_dy)]
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let shape = self.nodes[x.0].value.shape();
                let (c, hw) = (shape[1], shape[2] * shape[3]);
                let (xd, gd) = (val(*x), val(*gamma));
                let mut ggamma = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                let gx = dy
                    .iter()
                    .zip(xd)
                    .enumerate()
                    .map(|(i, (&g, &xv))| {
                        let ch = (i / hw) % c;
                        ggamma[ch] += g * (xv - mean[ch]) * inv_std[ch];
                        gbeta[ch] += g;
                        g * gd[ch] * inv_std[ch]
                    })
                    .collect();
                vec![(*x, gx), (*gamma, ggamma), (*beta, gbeta)]
            }
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels,
                count,
            } => {
                let c = self.nodes[logits.0].value.shape()[1];
                let mut g = vec![0.0; probs.len()];
                if *count > 0 {
                    let scale = dy[0] / *count as f64;
                    for (r, label) in labels.iter().enumerate() {
                        if let Some(l) = label {
                            for j in 0..c {
                                g[r * c + j] = scale * probs[r * c + j];
                            }
                            g[r * c + l] -= scale;
                        }
                    }
                }
                vec![(*logits, g)]
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        padding: usize,
        out_shape: &[usize],
        dy: &[f64],
    ) -> Vec<(Var, Vec<f64>)> {
        let (tx, tw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let [n, c, h, wd] = dims4(tx.shape(), "").expect("checked in forward");
        let [o, _, kh, kw] = dims4(tw.shape(), "").expect("checked in forward");
        let (oh, ow) = (out_shape[2], out_shape[3]);
        let (xd, wdat) = (tx.data(), tw.data());
        let mut gx = vec![0.0; xd.len()];
        let mut gw = vec![0.0; wdat.len()];
        let mut gb = vec![0.0; o];
        for ni in 0..n {
            for oc in 0..o {
                let gplane = &dy[(ni * o + oc) * oh * ow..][..oh * ow];
                gb[oc] += gplane.iter().sum::<f64>();
                for ci in 0..c {
                    let xoff = (ni * c + ci) * h * wd;
                    for ki in 0..kh {
                        let (r_lo, r_hi) = valid_range(ki, padding, stride, h, oh);
                        for kj in 0..kw {
                            let (c_lo, c_hi) = valid_range(kj, padding, stride, wd, ow);
                            let widx = ((oc * c + ci) * kh + ki) * kw + kj;
                            let wv = wdat[widx];
                            let mut acc = 0.0;
                            for oi in r_lo..r_hi {
                                let ii = oi * stride + ki - padding;
                                let row = xoff + ii * wd;
                                let grow = &gplane[oi * ow..(oi + 1) * ow];
                                for oj in c_lo..c_hi {
                                    let xi = row + oj * stride + kj - padding;
                                    acc += grow[oj] * xd[xi];
                                    gx[xi] += grow[oj] * wv;
                                }
                            }
                            gw[widx] += acc;
                        }
                    }
                }
            }
        }
        vec![(x, gx), (w, gw), (b, gb)]
    }
}
