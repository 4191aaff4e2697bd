//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value. [`Tape::backward`]
//! walks the nodes in reverse and accumulates gradients into the nodes that
//! (transitively) depend on a leaf created with [`Tape::leaf`].

use std::sync::Arc;

use crate::kernels::{self, ConvGeometry, Mat};
use crate::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Sigmoid(Var),
    Reshape(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeometry },
    Linear { x: Var, w: Var, b: Option<Var> },
    Bmm { a: Var, trans_a: bool, b: Var, trans_b: bool },
    Softmax(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Gather { x: Var, index: Arc<Vec<u32>> },
    Resize { x: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor<T>, inv_std: Vec<T> },
    ChannelAffine { x: Var, gamma: Var, beta: Var, mean: Vec<T>, inv_std: Vec<T> },
    /// Scalar objective whose gradient w.r.t. `x` was computed in closed form.
    Objective { x: Var, grad: Tensor<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Batch statistics produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, as used for running estimates.
    pub var: Vec<T>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of the leaves of a tape.
pub struct Grads<T>(Vec<Option<Tensor<T>>>);

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.0.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.0.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).scale(s);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, s), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshape(shape);
        let rg = self.rg(x);
        self.push(out, Op::Reshape(x), rg)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeometry) -> Var {
        let out = kernels::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), geom);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(out, Op::Conv2d { x, w, b, geom }, rg)
    }

    /// `x (rows, in) * w^T + b` with `w` shaped `(out, in)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.value(x);
        let ws = self.value(w);
        assert_eq!(xs.ndim(), 2, "linear expects (rows, features)");
        let (rows, fin) = (xs.shape()[0], xs.shape()[1]);
        let (fout, win) = (ws.shape()[0], ws.shape()[1]);
        assert_eq!(fin, win, "linear: input has {fin} features, weight expects {win}");
        let mut out = vec![T::zero(); rows * fout];
        kernels::matmul_into(Mat::new(xs.data(), rows, fin), Mat::new(ws.data(), fout, fin).t(), &mut out, false);
        if let Some(b) = b {
            let bias = self.value(b).data();
            assert_eq!(bias.len(), fout);
            for row in out.chunks_exact_mut(fout) {
                for (v, &bv) in row.iter_mut().zip(bias) {
                    *v += bv;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(Tensor::new(&[rows, fout], out), Op::Linear { x, w, b }, rg)
    }

    pub fn bmm(&mut self, a: Var, trans_a: bool, b: Var, trans_b: bool) -> Var {
        let out = kernels::bmm(self.value(a), trans_a, self.value(b), trans_b);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Bmm { a, trans_a, b, trans_b }, rg)
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let out = kernels::softmax_rows(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::Softmax(x), rg)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat(&values, axis);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::Concat { parts: parts.to_vec(), axis }, rg)
    }

    /// `out[i] = x[index[i]]` reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Arc<Vec<u32>>, shape: &[usize]) -> Var {
        let src = self.value(x).data();
        let data = index.iter().map(|&i| src[i as usize]).collect();
        let rg = self.rg(x);
        self.push(Tensor::new(shape, data), Op::Gather { x, index }, rg)
    }

    pub fn resize_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let out = kernels::resize_bilinear(self.value(x), oh, ow);
        let rg = self.rg(x);
        self.push(out, Op::Resize { x }, rg)
    }

    /// Batch normalization with statistics of the current batch.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> (Var, BatchStats<T>) {
        let xv = self.value(x);
        let (n, _, h, w) = xv.dims4();
        let (mean, var) = kernels::channel_moments(xv);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + T::lit(eps)).sqrt()).collect();
        let shift: Vec<T> = mean.iter().zip(&inv_std).map(|(&m, &s)| -m * s).collect();
        let xhat = kernels::channel_affine(xv, &inv_std, &shift);
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let out = kernels::channel_affine(&xhat, &g, &b);
        let count = (n * h * w) as f64;
        let correction = if count > 1.0 { T::lit(count / (count - 1.0)) } else { T::one() };
        let stats = BatchStats { mean, var: var.iter().map(|&v| v * correction).collect() };
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        (self.push(out, Op::BatchNorm { x, gamma, beta, xhat, inv_std }, rg), stats)
    }

    /// Batch normalization with fixed statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: f64) -> Var {
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + T::lit(eps)).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let scale: Vec<T> = g.iter().zip(&inv_std).map(|(&g, &s)| g * s).collect();
        let shift: Vec<T> = (0..g.len()).map(|i| b[i] - mean[i] * scale[i]).collect();
        let out = kernels::channel_affine(self.value(x), &scale, &shift);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(out, Op::ChannelAffine { x, gamma, beta, mean: mean.to_vec(), inv_std }, rg)
    }

    /// Scalar node with value `value` and precomputed gradient `grad` w.r.t. `x`.
    pub fn objective(&mut self, x: Var, value: T, grad: Tensor<T>) -> Var {
        assert_eq!(grad.shape(), self.shape(x), "objective gradient shape");
        let rg = self.rg(x);
        self.push(Tensor::scalar(value), Op::Objective { x, grad }, rg)
    }

    /// Gradients of a scalar `root`.
    pub fn backward(&self, root: Var) -> Grads<T> {
        assert_eq!(self.value(root).len(), 1, "backward from a non-scalar node needs a seed");
        self.backward_from(root, Tensor::new(self.shape(root), vec![T::one()]))
    }

    /// Vector-Jacobian product seeded with `seed` at `root`.
    pub fn backward_from(&self, root: Var, seed: Tensor<T>) -> Grads<T> {
        assert_eq!(seed.shape(), self.shape(root), "seed shape");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Grads(grads)
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let mut acc = |v: Var, t: Tensor<T>| {
            if !self.rg(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Scale(x, s) => acc(*x, g.scale(*s)),
            Op::Relu(x) => {
                let gx = self.value(*x).zip_map(g, |v, gv| if v > T::zero() { gv } else { T::zero() });
                acc(*x, gx);
            }
            Op::Sigmoid(x) => {
                let gx = node.value.zip_map(g, |y, gv| gv * y * (T::one() - y));
                acc(*x, gx);
            }
            Op::Reshape(x) => acc(*x, g.clone().reshape(self.shape(*x))),
            Op::Conv2d { x, w, b, geom } => {
                let grads = kernels::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    *geom,
                    self.rg(*x),
                    self.rg(*w),
                    b.is_some_and(|b| self.rg(b)),
                );
                if let Some(gx) = grads.input {
                    acc(*x, gx);
                }
                if let Some(gw) = grads.weight {
                    acc(*w, gw);
                }
                if let (Some(b), Some(gb)) = (b, grads.bias) {
                    acc(*b, gb);
                }
            }
            Op::Linear { x, w, b } => {
                let xs = self.value(*x);
                let ws = self.value(*w);
                let (rows, fin) = (xs.shape()[0], xs.shape()[1]);
                let fout = ws.shape()[0];
                let gm = Mat::new(g.data(), rows, fout);
                if self.rg(*x) {
                    let mut gx = vec![T::zero(); rows * fin];
                    kernels::matmul_into(gm, Mat::new(ws.data(), fout, fin), &mut gx, false);
                    acc(*x, Tensor::new(&[rows, fin], gx));
                }
                if self.rg(*w) {
                    let mut gw = vec![T::zero(); fout * fin];
                    kernels::matmul_into(gm.t(), Mat::new(xs.data(), rows, fin), &mut gw, false);
                    acc(*w, Tensor::new(&[fout, fin], gw));
                }
                if let Some(b) = b {
                    let mut gb = vec![T::zero(); fout];
                    for row in g.data().chunks_exact(fout) {
                        for (a, &v) in gb.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    acc(*b, Tensor::new(&[fout], gb));
                }
            }
            Op::Bmm { a, trans_a, b, trans_b } => {
                // C = op(A) op(B); dop(A) = dC op(B)^T, dop(B) = op(A)^T dC.
                let av = self.value(*a);
                let bv = self.value(*b);
                if self.rg(*a) {
                    let ga = if *trans_a {
                        kernels::bmm(bv, *trans_b, g, true)
                    } else {
                        kernels::bmm(g, false, bv, !*trans_b)
                    };
                    acc(*a, ga);
                }
                if self.rg(*b) {
                    let gb = if *trans_b {
                        kernels::bmm(g, true, av, *trans_a)
                    } else {
                        kernels::bmm(av, !*trans_a, g, false)
                    };
                    acc(*b, gb);
                }
            }
            Op::Softmax(x) => {
                let cols = *node.value.shape().last().unwrap();
                let mut gx = g.clone();
                for (grow, yrow) in gx.data_mut().chunks_exact_mut(cols).zip(node.value.data().chunks_exact(cols)) {
                    let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    for (gv, &y) in grow.iter_mut().zip(yrow) {
                        *gv = y * (*gv - dot);
                    }
                }
                acc(*x, gx);
            }
            Op::Concat { parts, axis } => {
                let mut start = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if self.rg(p) {
                        acc(p, g.narrow(*axis, start, start + len));
                    }
                    start += len;
                }
            }
            Op::Gather { x, index } => {
                let mut gx = Tensor::zeros(self.shape(*x));
                let dst = gx.data_mut();
                for (&i, &v) in index.iter().zip(g.data()) {
                    dst[i as usize] += v;
                }
                acc(*x, gx);
            }
            Op::Resize { x } => {
                let (_, _, h, w) = self.value(*x).dims4();
                acc(*x, kernels::resize_bilinear_backward(g, h, w));
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
                let (n, c, h, w) = xhat.dims4();
                let hw = h * w;
                let count = T::lit((n * hw) as f64);
                let gam = self.value(*gamma).data();
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for (i, (gp, xp)) in g.data().chunks_exact(hw).zip(xhat.data().chunks_exact(hw)).enumerate() {
                    let ch = i % c;
                    for (&gv, &xv) in gp.iter().zip(xp) {
                        sum_g[ch] += gv;
                        sum_gx[ch] += gv * xv;
                    }
                }
                if self.rg(*x) {
                    let mut gx = g.clone();
                    for (i, (gp, xp)) in gx.data_mut().chunks_exact_mut(hw).zip(xhat.data().chunks_exact(hw)).enumerate()
                    {
                        let ch = i % c;
                        let k = gam[ch] * inv_std[ch] / count;
                        for (gv, &xv) in gp.iter_mut().zip(xp) {
                            *gv = k * (count * *gv - sum_g[ch] - xv * sum_gx[ch]);
                        }
                    }
                    acc(*x, gx);
                }
                acc(*gamma, Tensor::new(&[c], sum_gx));
                acc(*beta, Tensor::new(&[c], sum_g));
            }
            Op::ChannelAffine { x, gamma, beta, mean, inv_std } => {
                let xv = self.value(*x);
                let (_, c, h, w) = xv.dims4();
                let hw = h * w;
                let gam = self.value(*gamma).data();
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for (i, (gp, xp)) in g.data().chunks_exact(hw).zip(xv.data().chunks_exact(hw)).enumerate() {
                    let ch = i % c;
                    for (&gv, &v) in gp.iter().zip(xp) {
                        sum_g[ch] += gv;
                        sum_gx[ch] += gv * (v - mean[ch]) * inv_std[ch];
                    }
                }
                if self.rg(*x) {
                    let mut gx = g.clone();
                    for (i, gp) in gx.data_mut().chunks_exact_mut(hw).enumerate() {
                        let k = gam[i % c] * inv_std[i % c];
                        for gv in gp {
                            *gv *= k;
                        }
                    }
                    acc(*x, gx);
                }
                acc(*gamma, Tensor::new(&[c], sum_gx));
                acc(*beta, Tensor::new(&[c], sum_g));
            }
            Op::Objective { x, grad } => {
                acc(*x, grad.scale(g.data()[0]));
            }
        }
    }
}
