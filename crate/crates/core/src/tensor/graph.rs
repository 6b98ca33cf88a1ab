//! Define-by-run computation graph with a topological-order reverse sweep.
//!
//! Nodes are appended in execution order, so the tape order is already a
//! topological order and `backward` walks it from the end.

use std::collections::HashMap;

use super::conv::{conv_backward, conv_forward, ConvGeom};
use super::{Conv2dSpec, ParamStore, Scalar, Tensor};
use crate::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Whether batch statistics or running statistics drive batchnorm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

/// Running-statistics update produced by a training-mode batchnorm call.
/// Applied to the [`ParamStore`] after the optimizer step.
#[derive(Debug, Clone)]
pub struct RunningUpdate<T> {
    pub mean_key: String,
    pub var_key: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Batchnorm running statistics and hyperparameters for one call.
#[derive(Debug, Clone)]
pub struct BatchNormArgs<'a, T> {
    pub running_mean: &'a [T],
    pub running_var: &'a [T],
    pub mean_key: &'a str,
    pub var_key: &'a str,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    Sum(usize),
    Relu(usize),
    Sigmoid(usize),
    Reshape(usize),
    Conv {
        x: usize,
        w: usize,
        geom: ConvGeom,
        per_sample: bool,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        channels: usize,
        spatial: usize,
        training: bool,
    },
    AvgPool2(usize),
    MeanAxis {
        x: usize,
        axis: usize,
    },
    MaxAxis {
        x: usize,
        argmax: Vec<usize>,
    },
    Linear {
        x: usize,
        w: usize,
        b: usize,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    SliceAxis0 {
        x: usize,
        start: usize,
    },
    Softmax(usize),
    Nll {
        probs: usize,
        targets: Vec<usize>,
    },
    ScaleLastAxis {
        x: usize,
        gate: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A computation graph recorded during one forward pass.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    params: HashMap<String, Var>,
    param_order: Vec<String>,
    running_updates: Vec<RunningUpdate<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
            param_order: Vec::new(),
            running_updates: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: usize) -> bool {
        self.nodes[v].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    /// Gradient of the last `backward` call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Records a leaf tensor.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Records a non-differentiable input.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Binds a named parameter from `store` as a leaf. Binding the same
    /// name twice returns the same node.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let p = store.get(name).ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        let v = self.leaf(p.tensor.clone(), p.trainable);
        self.params.insert(name.to_string(), v);
        self.param_order.push(name.to_string());
        Ok(v)
    }

    /// Gradients of every trainable parameter bound into this graph.
    pub fn param_grads(&self) -> Vec<(String, Vec<T>)> {
        self.param_order
            .iter()
            .filter_map(|name| {
                let v = self.params[name];
                if !self.nodes[v.0].requires_grad {
                    return None;
                }
                self.grads[v.0].as_ref().map(|g| (name.clone(), g.clone()))
            })
            .collect()
    }

    pub fn take_running_updates(&mut self) -> Vec<RunningUpdate<T>> {
        std::mem::take(&mut self.running_updates)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn unary_map(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| f(v)).collect();
        let value = Tensor { shape: src.shape().to_vec(), data };
        let rg = self.rg(x.0);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        let value = Tensor { shape: self.shape(a).to_vec(), data };
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(value, Op::Add(a.0, b.0), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        let value = Tensor { shape: self.shape(a).to_vec(), data };
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(value, Op::Mul(a.0, b.0), rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary_map(x, Op::Scale(x.0, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        self.unary_map(x, Op::AddScalar(x.0), |v| v + c)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().copied().sum();
        let rg = self.rg(x.0);
        self.push(Tensor::scalar(s), Op::Sum(x.0), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary_map(x, Op::Relu(x.0), |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary_map(x, Op::Sigmoid(x.0), |v| T::one() / (T::one() + (-v).exp()))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(x.0);
        Ok(self.push(value, Op::Reshape(x.0), rg))
    }

    /// 2-D convolution of `[N,C,H,W]` with a shared `[K,C,kh,kw]` kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, spec: Conv2dSpec) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), spec)?;
        let out = conv_forward(self.data(x), self.data(w), 0, &geom);
        let value = Tensor { shape: geom.out_shape(), data: out };
        let rg = self.rg(x.0) || self.rg(w.0);
        Ok(self.push(value, Op::Conv { x: x.0, w: w.0, geom, per_sample: false }, rg))
    }

    /// 2-D convolution where sample `n` of `[N,C,H,W]` uses its own kernel
    /// `kernels[n]` from a `[N,K,C,kh,kw]` tensor.
    pub fn conv2d_per_sample(&mut self, x: Var, kernels: Var, spec: Conv2dSpec) -> Result<Var> {
        let ks = self.shape(kernels);
        let xs = self.shape(x);
        if ks.len() != 5 || xs.len() != 4 || ks[0] != xs[0] {
            return Err(Error::shape(
                "conv2d_per_sample",
                format!("expected input [N,C,H,W] and kernels [N,K,C,kh,kw], got {xs:?} and {ks:?}"),
            ));
        }
        let geom = ConvGeom::new(xs, &ks[1..], spec)?;
        let stride = geom.k * geom.col_rows();
        let out = conv_forward(self.data(x), self.data(kernels), stride, &geom);
        let value = Tensor { shape: geom.out_shape(), data: out };
        let rg = self.rg(x.0) || self.rg(kernels.0);
        Ok(self.push(value, Op::Conv { x: x.0, w: kernels.0, geom, per_sample: true }, rg))
    }

    /// Per-channel batch normalisation of `[N,C,...]` (axis 1 is the channel
    /// axis; `[N,C]` inputs normalise each feature over the batch).
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        args: BatchNormArgs<'_, T>,
        mode: Mode,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("batchnorm", format!("need [N,C,...], got {shape:?}")));
        }
        let (n, c) = (shape[0], shape[1]);
        let spatial: usize = shape[2..].iter().product();
        for (what, len) in [
            ("gamma", self.value(gamma).len()),
            ("beta", self.value(beta).len()),
            ("running_mean", args.running_mean.len()),
            ("running_var", args.running_var.len()),
        ] {
            if len != c {
                return Err(Error::shape("batchnorm", format!("{what} has {len} entries, expected {c}")));
            }
        }
        let count = n * spatial;
        let training = mode == Mode::Train;
        if training && count < 2 {
            return Err(Error::DegenerateVariance(count));
        }
        let eps = T::from_f64_lossy(args.eps);
        let xs = self.data(x);
        let (mean, var) = if training {
            let cnt = T::from_f64_lossy(count as f64);
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut s = T::zero();
                for b in 0..n {
                    let off = (b * c + ch) * spatial;
                    s += xs[off..off + spatial].iter().copied().sum::<T>();
                }
                let m = s / cnt;
                let mut ss = T::zero();
                for b in 0..n {
                    let off = (b * c + ch) * spatial;
                    ss += xs[off..off + spatial].iter().map(|&v| (v - m) * (v - m)).sum::<T>();
                }
                mean[ch] = m;
                var[ch] = ss / cnt;
            }
            (mean, var)
        } else {
            (args.running_mean.to_vec(), args.running_var.to_vec())
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gs = self.data(gamma);
        let bs = self.data(beta);
        let mut xhat = vec![T::zero(); xs.len()];
        let mut out = vec![T::zero(); xs.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * spatial;
                for i in off..off + spatial {
                    let h = (xs[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = gs[ch] * h + bs[ch];
                }
            }
        }
        if training {
            let mom = T::from_f64_lossy(args.momentum);
            let keep = T::one() - mom;
            let unbias = T::from_f64_lossy(count as f64 / (count - 1) as f64);
            self.running_updates.push(RunningUpdate {
                mean_key: args.mean_key.to_string(),
                var_key: args.var_key.to_string(),
                mean: args.running_mean.iter().zip(&mean).map(|(&r, &m)| keep * r + mom * m).collect(),
                var: args
                    .running_var
                    .iter()
                    .zip(&var)
                    .map(|(&r, &v)| keep * r + mom * v * unbias)
                    .collect(),
            });
        }
        let rg = self.rg(x.0) || self.rg(gamma.0) || self.rg(beta.0);
        let op = Op::BatchNorm {
            x: x.0,
            gamma: gamma.0,
            beta: beta.0,
            xhat,
            inv_std,
            channels: c,
            spatial,
            training,
        };
        Ok(self.push(Tensor { shape, data: out }, op, rg))
    }

    /// Non-overlapping 2×2 average pooling over the last two axes of
    /// `[N,C,H,W]`; odd trailing rows/columns are dropped.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 || shape[2] < 2 || shape[3] < 2 {
            return Err(Error::shape("avgpool2d", format!("need [N,C,H>=2,W>=2], got {shape:?}")));
        }
        let (planes, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
        let (oh, ow) = (h / 2, w / 2);
        let xs = self.data(x);
        let quarter = T::from_f64_lossy(0.25);
        let mut out = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let plane = &xs[p * h * w..(p + 1) * h * w];
            for oy in 0..oh {
                let r0 = &plane[2 * oy * w..];
                let r1 = &plane[(2 * oy + 1) * w..];
                for ox in 0..ow {
                    let s = r0[2 * ox] + r0[2 * ox + 1] + r1[2 * ox] + r1[2 * ox + 1];
                    out.push(s * quarter);
                }
            }
        }
        let rg = self.rg(x.0);
        let value = Tensor { shape: vec![shape[0], shape[1], oh, ow], data: out };
        Ok(self.push(value, Op::AvgPool2(x.0), rg))
    }

    /// Mean over one axis (removed from the shape).
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::shape("mean_axis", format!("axis {axis} of {shape:?}")));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let xs = self.data(x);
        let inv = T::one() / T::from_f64_lossy(len as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let row = &xs[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let mut oshape = shape.clone();
        oshape.remove(axis);
        let rg = self.rg(x.0);
        Ok(self.push(Tensor { shape: oshape, data: out }, Op::MeanAxis { x: x.0, axis }, rg))
    }

    /// Maximum over one axis (removed from the shape). The gradient flows
    /// to the first maximal element.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::shape("max_axis", format!("axis {axis} of {shape:?}")));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let xs = self.data(x);
        let mut out = vec![T::neg_infinity(); outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    let src = (o * len + l) * inner + i;
                    let dst = o * inner + i;
                    if l == 0 || xs[src] > out[dst] {
                        out[dst] = xs[src];
                        argmax[dst] = src;
                    }
                }
            }
        }
        let mut oshape = shape.clone();
        oshape.remove(axis);
        let rg = self.rg(x.0);
        Ok(self.push(Tensor { shape: oshape, data: out }, Op::MaxAxis { x: x.0, argmax }, rg))
    }

    /// `out[n,o] = Σ_d x[n,d]·w[o,d] + b[o]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || bs != [ws[0]] || xs[1] != ws[1] {
            return Err(Error::shape(
                "linear",
                format!("input {xs:?}, weight {ws:?}, bias {bs:?}"),
            ));
        }
        let (n, d, o) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::zero(); n * o];
        T::gemm(n, d, o, self.data(x), false, self.data(w), true, &mut out, false);
        let bias = self.data(b);
        for row in out.chunks_mut(o) {
            for (v, &bb) in row.iter_mut().zip(bias) {
                *v += bb;
            }
        }
        let rg = self.rg(x.0) || self.rg(w.0) || self.rg(b.0);
        Ok(self.push(Tensor { shape: vec![n, o], data: out }, Op::Linear { x: x.0, w: w.0, b: b.0 }, rg))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} of {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", format!("{s:?} vs {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let d = self.data(p);
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = parts.iter().any(|p| self.rg(p.0));
        let inputs = parts.iter().map(|p| p.0).collect();
        Ok(self.push(Tensor { shape, data: out }, Op::Concat { inputs, axis }, rg))
    }

    /// Rows `start..end` of the leading axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || start > end || end > shape[0] {
            return Err(Error::shape("slice_rows", format!("{start}..{end} of {shape:?}")));
        }
        let row: usize = shape[1..].iter().product();
        let data = self.data(x)[start * row..end * row].to_vec();
        let mut oshape = shape;
        oshape[0] = end - start;
        let rg = self.rg(x.0);
        Ok(self.push(Tensor { shape: oshape, data }, Op::SliceAxis0 { x: x.0, start }, rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let width = *shape.last().ok_or_else(|| Error::shape("softmax", "scalar input"))?;
        if width == 0 {
            return Err(Error::shape("softmax", "empty last axis"));
        }
        let xs = self.data(x);
        if xs.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("softmax input must be finite".into()));
        }
        let mut out = Vec::with_capacity(xs.len());
        for row in xs.chunks(width) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let e: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
            let s = e.iter().copied().fold(T::zero(), |a, b| a + b);
            out.extend(e.into_iter().map(|v| v / s));
        }
        let rg = self.rg(x.0);
        Ok(self.push(Tensor { shape, data: out }, Op::Softmax(x.0), rg))
    }

    /// Mean negative log-likelihood of `probs[n, targets[n]]` over rows.
    pub fn nll_loss(&mut self, probs: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(probs).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() || shape[0] == 0 {
            return Err(Error::shape(
                "nll_loss",
                format!("probs {shape:?} with {} targets", targets.len()),
            ));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= shape[1]) {
            return Err(Error::InvalidArgument(format!(
                "target class {t} outside 0..{}",
                shape[1]
            )));
        }
        let ps = self.data(probs);
        let tiny = T::min_positive_value();
        let total: T = targets
            .iter()
            .enumerate()
            .map(|(n, &t)| -(ps[n * shape[1] + t].max(tiny)).ln())
            .sum();
        let loss = total / T::from_f64_lossy(targets.len() as f64);
        let rg = self.rg(probs.0);
        Ok(self.push(Tensor::scalar(loss), Op::Nll { probs: probs.0, targets: targets.to_vec() }, rg))
    }

    /// Multiplies `x` of shape `[N, ..., F]` by `gate[n, f]`, broadcasting
    /// over every axis between the first and the last.
    pub fn scale_last_axis(&mut self, x: Var, gate: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let gs = self.shape(gate).to_vec();
        if xs.len() < 2 || gs.len() != 2 || gs[0] != xs[0] || gs[1] != *xs.last().unwrap() {
            return Err(Error::shape("scale_last_axis", format!("x {xs:?}, gate {gs:?}")));
        }
        let (n, f) = (gs[0], gs[1]);
        let per = self.value(x).len() / n;
        let xd = self.data(x);
        let gd = self.data(gate);
        let mut out = Vec::with_capacity(xd.len());
        for b in 0..n {
            let g = &gd[b * f..(b + 1) * f];
            for row in xd[b * per..(b + 1) * per].chunks(f) {
                out.extend(row.iter().zip(g).map(|(&v, &w)| v * w));
            }
        }
        let rg = self.rg(x.0) || self.rg(gate.0);
        Ok(self.push(Tensor { shape: xs, data: out }, Op::ScaleLastAxis { x: x.0, gate: gate.0 }, rg))
    }

    fn add_grad(&mut self, idx: usize, g: Vec<T>) {
        if !self.nodes[idx].requires_grad {
            return;
        }
        match &mut self.grads[idx] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    /// Reverse sweep from a scalar `loss`. Afterwards every leaf with
    /// `requires_grad` holds a gradient (zeros when unreachable).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lshape = self.shape(loss).to_vec();
        if self.value(loss).len() != 1 || lshape.iter().any(|&d| d != 1) {
            return Err(Error::NonScalarLoss(lshape));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let contributions = self.node_backward(i, &g);
            self.grads[i] = Some(g);
            for (idx, c) in contributions {
                self.add_grad(idx, c);
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && self.grads[i].is_none() {
                self.grads[i] = Some(vec![T::zero(); node.value.len()]);
            }
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, g: &[T]) -> Vec<(usize, Vec<T>)> {
        let node = &self.nodes[i];
        let val = |j: usize| self.nodes[j].value.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    out.push((*a, g.iter().zip(val(*b)).map(|(&g, &y)| g * y).collect()));
                }
                if self.rg(*b) {
                    out.push((*b, g.iter().zip(val(*a)).map(|(&g, &x)| g * x).collect()));
                }
            }
            Op::Scale(x, c) => out.push((*x, g.iter().map(|&v| v * *c).collect())),
            Op::AddScalar(x) | Op::Reshape(x) => out.push((*x, g.to_vec())),
            Op::Sum(x) => out.push((*x, vec![g[0]; self.nodes[*x].value.len()])),
            Op::Relu(x) => out.push((
                *x,
                g.iter()
                    .zip(val(*x))
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect(),
            )),
            Op::Sigmoid(x) => out.push((
                *x,
                g.iter()
                    .zip(node.value.data())
                    .map(|(&g, &s)| g * s * (T::one() - s))
                    .collect(),
            )),
            Op::Conv { x, w, geom, per_sample } => {
                let stride = if *per_sample { geom.k * geom.col_rows() } else { 0 };
                let mut dx = self.rg(*x).then(|| vec![T::zero(); self.nodes[*x].value.len()]);
                let mut dw = self.rg(*w).then(|| vec![T::zero(); self.nodes[*w].value.len()]);
                conv_backward(val(*x), val(*w), stride, geom, g, dx.as_deref_mut(), dw.as_deref_mut());
                out.extend(dx.map(|d| (*x, d)));
                out.extend(dw.map(|d| (*w, d)));
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, channels, spatial, training } => {
                let (c, s) = (*channels, *spatial);
                let n = g.len() / (c * s);
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * s;
                        for k in off..off + s {
                            sum_g[ch] += g[k];
                            sum_gx[ch] += g[k] * xhat[k];
                        }
                    }
                }
                if self.rg(*x) {
                    let gam = val(*gamma);
                    let m = T::from_f64_lossy((n * s) as f64);
                    let mut dx = vec![T::zero(); g.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * s;
                            let scale = gam[ch] * inv_std[ch];
                            for k in off..off + s {
                                dx[k] = if *training {
                                    scale * (g[k] - sum_g[ch] / m - xhat[k] * sum_gx[ch] / m)
                                } else {
                                    scale * g[k]
                                };
                            }
                        }
                    }
                    out.push((*x, dx));
                }
                out.push((*gamma, sum_gx));
                out.push((*beta, sum_g));
            }
            Op::AvgPool2(x) => {
                let shape = self.nodes[*x].value.shape();
                let (planes, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
                let (oh, ow) = (h / 2, w / 2);
                let quarter = T::from_f64_lossy(0.25);
                let mut dx = vec![T::zero(); planes * h * w];
                for p in 0..planes {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let v = g[(p * oh + oy) * ow + ox] * quarter;
                            let base = p * h * w + 2 * oy * w + 2 * ox;
                            dx[base] = v;
                            dx[base + 1] = v;
                            dx[base + w] = v;
                            dx[base + w + 1] = v;
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::MeanAxis { x, axis } => {
                let (outer, len, inner) = axis_split(self.nodes[*x].value.shape(), *axis);
                let inv = T::one() / T::from_f64_lossy(len as f64);
                let mut dx = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    let go = &g[o * inner..(o + 1) * inner];
                    for l in 0..len {
                        let row = &mut dx[(o * len + l) * inner..(o * len + l + 1) * inner];
                        row.iter_mut().zip(go).for_each(|(d, &v)| *d = v * inv);
                    }
                }
                out.push((*x, dx));
            }
            Op::MaxAxis { x, argmax } => {
                let mut dx = vec![T::zero(); self.nodes[*x].value.len()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    dx[src] += gv;
                }
                out.push((*x, dx));
            }
            Op::Linear { x, w, b } => {
                let xs = self.nodes[*x].value.shape();
                let (n, d) = (xs[0], xs[1]);
                let o = self.nodes[*w].value.shape()[0];
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); n * d];
                    T::gemm(n, o, d, g, false, val(*w), false, &mut dx, false);
                    out.push((*x, dx));
                }
                if self.rg(*w) {
                    let mut dw = vec![T::zero(); o * d];
                    T::gemm(o, n, d, g, true, val(*x), false, &mut dw, false);
                    out.push((*w, dw));
                }
                if self.rg(*b) {
                    let mut db = vec![T::zero(); o];
                    for row in g.chunks(o) {
                        db.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                    }
                    out.push((*b, db));
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in inputs {
                    let len = self.nodes[p].value.shape()[*axis];
                    if self.rg(p) {
                        let mut dp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            dp.extend_from_slice(&g[start..start + len * inner]);
                        }
                        out.push((p, dp));
                    }
                    offset += len;
                }
            }
            Op::SliceAxis0 { x, start } => {
                let xv = &self.nodes[*x].value;
                let row: usize = xv.shape()[1..].iter().product();
                let mut dx = vec![T::zero(); xv.len()];
                dx[start * row..start * row + g.len()].copy_from_slice(g);
                out.push((*x, dx));
            }
            Op::Softmax(x) => {
                let p = node.value.data();
                let width = *node.value.shape().last().unwrap();
                let mut dx = Vec::with_capacity(p.len());
                for (pr, gr) in p.chunks(width).zip(g.chunks(width)) {
                    let dot: T = pr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    dx.extend(pr.iter().zip(gr).map(|(&pv, &gv)| pv * (gv - dot)));
                }
                out.push((*x, dx));
            }
            Op::Nll { probs, targets } => {
                let pv = val(*probs);
                let width = self.nodes[*probs].value.shape()[1];
                let scale = g[0] / T::from_f64_lossy(targets.len() as f64);
                let tiny = T::min_positive_value();
                let mut dp = vec![T::zero(); pv.len()];
                for (n, &t) in targets.iter().enumerate() {
                    let k = n * width + t;
                    dp[k] = -scale / pv[k].max(tiny);
                }
                out.push((*probs, dp));
            }
            Op::ScaleLastAxis { x, gate } => {
                let gs = self.nodes[*gate].value.shape();
                let (n, f) = (gs[0], gs[1]);
                let xd = val(*x);
                let gd = val(*gate);
                let per = xd.len() / n;
                let mut dx = vec![T::zero(); xd.len()];
                let mut dg = vec![T::zero(); gd.len()];
                for b in 0..n {
                    for chunk in (b * per..(b + 1) * per).step_by(f) {
                        for j in 0..f {
                            let k = chunk + j;
                            dx[k] = g[k] * gd[b * f + j];
                            dg[b * f + j] += g[k] * xd[k];
                        }
                    }
                }
                if self.rg(*x) {
                    out.push((*x, dx));
                }
                if self.rg(*gate) {
                    out.push((*gate, dg));
                }
            }
        }
        out
    }
}
