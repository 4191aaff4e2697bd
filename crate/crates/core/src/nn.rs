//! Named parameter storage and the layers built on top of the tape.

use std::collections::HashMap;

use prn_tensor::{ConvGeometry, Grads, Scalar, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Trainable, subject to weight decay.
    Weight,
    /// Trainable normalization scale/shift, no weight decay.
    Norm,
    /// Running statistics, updated outside the optimizer.
    Buffer,
}

#[derive(Clone, Debug)]
struct Entry<T> {
    name: String,
    kind: ParamKind,
    value: Tensor<T>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), by_name: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        self.by_name.insert(name.clone(), self.entries.len());
        self.entries.push(Entry { name, kind, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        matches!(self.kind(id), ParamKind::Weight | ParamKind::Norm)
    }

    pub fn num_trainable(&self) -> usize {
        self.ids().filter(|&id| self.is_trainable(id)).map(|id| self.get(id).len()).sum()
    }

    /// Same names, kinds and shapes, values converted.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry { name: e.name.clone(), kind: e.kind, value: e.value.cast() })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// Forward-pass context: the tape plus bookkeeping for parameters.
pub struct Ctx<'a, T: Scalar> {
    pub tape: Tape<T>,
    store: &'a ParamStore<T>,
    train: bool,
    leaves: HashMap<ParamId, Var>,
    bn_updates: Vec<(ParamId, ParamId, prn_tensor::BatchStats<T>)>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(store: &'a ParamStore<T>, train: bool) -> Self {
        Self { tape: Tape::new(), store, train, leaves: HashMap::new(), bn_updates: Vec::new() }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// Tape node for a parameter; trainable ones become differentiable leaves in
    /// training mode, everything else is a constant.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.leaves.get(&id) {
            return v;
        }
        let value = self.store.get(id).clone();
        let v = if self.train && self.store.is_trainable(id) {
            self.tape.leaf(value)
        } else {
            self.tape.constant(value)
        };
        self.leaves.insert(id, v);
        v
    }

    pub fn param_grads(&self, grads: &mut Grads<T>) -> Vec<(ParamId, Tensor<T>)> {
        let mut out: Vec<(ParamId, Tensor<T>)> = self
            .leaves
            .iter()
            .filter_map(|(&id, &v)| grads.take(v).map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    /// Running-statistics updates gathered during a training forward pass.
    pub fn take_bn_updates(&mut self) -> Vec<(ParamId, ParamId, prn_tensor::BatchStats<T>)> {
        std::mem::take(&mut self.bn_updates)
    }
}

/// Applies running-statistics updates with `momentum` (PyTorch convention).
pub fn apply_bn_updates<T: Scalar>(
    store: &mut ParamStore<T>,
    updates: Vec<(ParamId, ParamId, prn_tensor::BatchStats<T>)>,
    momentum: f64,
) {
    let m = T::lit(momentum);
    for (mean_id, var_id, stats) in updates {
        for (r, &b) in store.get_mut(mean_id).data_mut().iter_mut().zip(&stats.mean) {
            *r = (T::one() - m) * *r + m * b;
        }
        for (r, &b) in store.get_mut(var_id).data_mut().iter_mut().zip(&stats.var) {
            *r = (T::one() - m) * *r + m * b;
        }
    }
}

fn uniform_init<T: Scalar>(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(rng.random_range(-bound..=bound)))
}

pub fn normal_init<T: Scalar>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| T::lit(dist.sample(rng)))
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeometry,
}

pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self { in_channels, out_channels, kernel, stride: 1, padding: kernel / 2, groups: 1, bias: true }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }
}

impl Conv2d {
    /// Uniform init with bound `1/sqrt(fan_in)` for weight and bias.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, spec: ConvSpec, rng: &mut impl Rng) -> Self {
        let cg = spec.in_channels / spec.groups;
        let fan_in = (cg * spec.kernel * spec.kernel) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            ParamKind::Weight,
            uniform_init(&[spec.out_channels, cg, spec.kernel, spec.kernel], bound, rng),
        );
        let bias = spec
            .bias
            .then(|| store.add(format!("{name}.bias"), ParamKind::Weight, uniform_init(&[spec.out_channels], bound, rng)));
        Self { weight, bias, geom: ConvGeometry { stride: spec.stride, padding: spec.padding, groups: spec.groups } }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Var {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        ctx.tape.conv2d(x, w, b, self.geom)
    }

    pub fn out_channels<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        store.get(self.weight).shape()[0]
    }

    pub fn zero<T: Scalar>(&self, store: &mut ParamStore<T>) {
        store.get_mut(self.weight).data_mut().fill(T::zero());
        if let Some(b) = self.bias {
            store.get_mut(b).data_mut().fill(T::zero());
        }
    }
}

/// Dense layer on `(rows, features)`; weight stored `(out, in)`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / (in_features as f64).sqrt();
        let weight =
            store.add(format!("{name}.weight"), ParamKind::Weight, uniform_init(&[out_features, in_features], bound, rng));
        let bias = store.add(format!("{name}.bias"), ParamKind::Weight, uniform_init(&[out_features], bound, rng));
        Self { weight, bias }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Var {
        let w = ctx.param(self.weight);
        let b = ctx.param(self.bias);
        ctx.tape.linear(x, w, Some(b))
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

impl BatchNorm2d {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), ParamKind::Norm, Tensor::full(&[channels], T::one())),
            beta: store.add(format!("{name}.beta"), ParamKind::Norm, Tensor::zeros(&[channels])),
            running_mean: store.add(format!("{name}.running_mean"), ParamKind::Buffer, Tensor::zeros(&[channels])),
            running_var: store.add(format!("{name}.running_var"), ParamKind::Buffer, Tensor::full(&[channels], T::one())),
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Var {
        let g = ctx.param(self.gamma);
        let b = ctx.param(self.beta);
        if ctx.train {
            let (y, stats) = ctx.tape.batch_norm_train(x, g, b, BN_EPS);
            ctx.bn_updates.push((self.running_mean, self.running_var, stats));
            y
        } else {
            let mean = ctx.store.get(self.running_mean).data().to_vec();
            let var = ctx.store.get(self.running_var).data().to_vec();
            ctx.tape.batch_norm_eval(x, g, b, &mean, &var, BN_EPS)
        }
    }
}

/// Conv, batch norm, ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBnRelu {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, spec: ConvSpec, rng: &mut impl Rng) -> Self {
        let channels = spec.out_channels;
        Self { conv: Conv2d::new(store, &format!("{name}.conv"), spec, rng), bn: BatchNorm2d::new(store, &format!("{name}.bn"), channels) }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Var {
        let y = self.conv.forward(ctx, x);
        let y = self.bn.forward(ctx, y);
        ctx.tape.relu(y)
    }
}
