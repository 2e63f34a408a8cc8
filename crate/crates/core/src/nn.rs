//! Parameter storage, graph construction and the standard layers.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{invalid, Result};
use crate::ops::ConvSpec;
use crate::tensor::{Scalar, Tensor};

/// Optimiser/freeze groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    /// Stem, branches, projections, scale injection and cross-scale gating.
    VisionBackbone,
    /// Local-global block and classification head.
    VisionHead,
    /// The sequence model, including the vision prefix projection.
    Language,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::VisionBackbone, Group::VisionHead, Group::Language];

    fn idx(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Kind {
    Weight,
    /// Non-trainable state such as batch-norm running statistics.
    Buffer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub group: Group,
    pub kind: Kind,
}

#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    trainable: [bool; 3],
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            trainable: [true; 3],
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, group: Group, kind: Kind) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            group,
            kind,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn set_trainable(&mut self, group: Group, on: bool) {
        self.trainable[group.idx()] = on;
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        let p = &self.params[id.0];
        p.kind == Kind::Weight && self.trainable[p.group.idx()]
    }

    /// Number of scalar weights (buffers excluded) in the given groups.
    pub fn count(&self, groups: &[Group]) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind == Kind::Weight && groups.contains(&p.group))
            .map(|p| p.value.numel())
            .sum()
    }

    /// FNV-1a over names and raw bits of every entry (weights and buffers)
    /// in the given groups. Used to prove frozen groups did not move.
    pub fn checksum(&self, groups: &[Group]) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for p in self.params.iter().filter(|p| groups.contains(&p.group)) {
            feed(p.name.as_bytes());
            for v in p.value.data() {
                feed(&v.as_f64().to_bits().to_le_bytes());
            }
        }
        h
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    group: p.group,
                    kind: p.kind,
                })
                .collect(),
            trainable: self.trainable,
        }
    }
}

/// Gradients for trainable parameters, indexed by [`ParamId`].
pub struct ParamGrads<T> {
    pub grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

/// One forward/backward pass: a tape plus lazily bound parameters.
pub struct Graph<'s, T> {
    pub tape: Tape<T>,
    store: &'s mut ParamStore<T>,
    bound: Vec<Option<Var>>,
    train: bool,
    rng: ChaCha8Rng,
}

impl<'s, T: Scalar> Graph<'s, T> {
    pub fn new(store: &'s mut ParamStore<T>, train: bool, seed: u64) -> Self {
        let n = store.len();
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; n],
            train,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// The tape leaf for a parameter, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let requires = self.store.is_trainable(id);
        let v = self.tape.leaf(self.store.value(id).clone(), requires);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn buffer(&self, id: ParamId) -> &Tensor<T> {
        self.store.value(id)
    }

    pub fn buffer_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        self.store.value_mut(id)
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.tape.constant(t)
    }

    /// Inverted dropout; identity outside training or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !self.train || p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(invalid("dropout", format!("probability must be < 1, got {p}")));
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let n = self.tape.value(x).numel();
        let mask = (0..n)
            .map(|_| if self.rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        self.tape.dropout(x, mask)
    }

    /// Runs the reverse pass and collects gradients of trainable parameters.
    pub fn backward(self, loss: Var) -> Result<ParamGrads<T>> {
        let mut g = self.tape.backward(loss)?;
        let grads = self
            .bound
            .iter()
            .map(|v| v.and_then(|v| g.take(v)))
            .collect();
        Ok(ParamGrads { grads })
    }
}

// -------------------------------------------------------------------- init

pub fn uniform_tensor<T: Scalar>(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor<T> {
    if bound == 0.0 {
        return Tensor::zeros(shape);
    }
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Tensor::from_fn(shape, |_| T::lit(dist.sample(rng)))
}

pub fn normal_tensor<T: Scalar>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::lit(z * std)
    })
}

// -------------------------------------------------------------------- layers

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        din: usize,
        dout: usize,
        bias: bool,
        group: Group,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / (din as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform_tensor(&[din, dout], bound, rng), group, Kind::Weight);
        let bias = bias.then(|| store.add(format!("{name}.bias"), uniform_tensor(&[dout], bound, rng), group, Kind::Weight));
        Self { weight, bias, din, dout }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.tape.linear(x, w, b)
    }

    pub fn num_params(&self) -> usize {
        self.din * self.dout + if self.bias.is_some() { self.dout } else { 0 }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv2d {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: ConvSpec,
        bias: bool,
        group: Group,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        spec.validate()?;
        let ws = spec.weight_shape();
        let fan_in = ws[1] * ws[2] * ws[3];
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform_tensor(&ws, bound, rng), group, Kind::Weight);
        let bias = bias.then(|| {
            store.add(format!("{name}.bias"), uniform_tensor(&[spec.out_channels], bound, rng), group, Kind::Weight)
        });
        Ok(Self { spec, weight, bias })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.tape.conv2d(x, w, b, self.spec)
    }
}

pub const BATCH_NORM_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, group: Group) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels]), group, Kind::Weight),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), group, Kind::Weight),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), group, Kind::Buffer),
            running_var: store.add(format!("{name}.running_var"), Tensor::ones(&[channels]), group, Kind::Buffer),
        }
    }

    /// Batch statistics in training mode (updating the running estimates),
    /// running statistics otherwise. A frozen layer always uses its running
    /// statistics.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        if g.is_train() && g.store().is_trainable(self.gamma) {
            let (y, mean, var) = g.tape.batch_norm_train(x, gamma, beta)?;
            let m = T::lit(BATCH_NORM_MOMENTUM);
            for (r, v) in g.buffer_mut(self.running_mean).data_mut().iter_mut().zip(&mean) {
                *r = (T::one() - m) * *r + m * *v;
            }
            for (r, v) in g.buffer_mut(self.running_var).data_mut().iter_mut().zip(&var) {
                *r = (T::one() - m) * *r + m * *v;
            }
            Ok(y)
        } else {
            let mean = g.buffer(self.running_mean).data().to_vec();
            let var = g.buffer(self.running_var).data().to_vec();
            g.tape.batch_norm_eval(x, gamma, beta, &mean, &var)
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize, group: Group) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[dim]), group, Kind::Weight),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim]), group, Kind::Weight),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.tape.layer_norm(x, gamma, beta)
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        vocab: usize,
        dim: usize,
        group: Group,
        rng: &mut impl Rng,
    ) -> Self {
        let table = store.add(format!("{name}.table"), normal_tensor(&[vocab, dim], 1.0, rng), group, Kind::Weight);
        Self { table, vocab, dim }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ids: &[usize]) -> Result<Var> {
        let t = g.param(self.table);
        g.tape.embedding(t, ids)
    }
}

/// Seeded generator used for every initialisation in the crate.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_group_is_not_differentiated() {
        let mut rng = seeded_rng(0);
        let mut store = ParamStore::<f64>::new();
        let a = Linear::new(&mut store, "a", 3, 2, true, Group::VisionHead, &mut rng);
        let b = Linear::new(&mut store, "b", 2, 1, true, Group::Language, &mut rng);
        store.set_trainable(Group::VisionHead, false);
        let mut g = Graph::new(&mut store, true, 0);
        let x = g.input(Tensor::ones(&[4, 3]));
        let h = a.forward(&mut g, x).unwrap();
        let y = b.forward(&mut g, h).unwrap();
        let s = g.tape.sum(y);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(a.weight).is_none());
        assert!(grads.get(b.weight).is_some());
    }

    #[test]
    fn linear_param_count() {
        let mut rng = seeded_rng(0);
        let mut store = ParamStore::<f32>::new();
        let l = Linear::new(&mut store, "l", 294, 64, true, Group::VisionHead, &mut rng);
        assert_eq!(l.num_params(), 294 * 64 + 64);
        assert_eq!(store.count(&[Group::VisionHead]), 294 * 64 + 64);
    }

    #[test]
    fn batch_norm_eval_of_zeros_with_zero_shift_is_zero() {
        let mut store = ParamStore::<f32>::new();
        let bn = BatchNorm2d::new(&mut store, "bn", 2, Group::VisionBackbone);
        let mut g = Graph::new(&mut store, false, 0);
        let x = g.input(Tensor::zeros(&[1, 2, 3, 3]));
        let y = bn.forward(&mut g, x).unwrap();
        assert!(g.tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn checksum_tracks_group_contents() {
        let mut rng = seeded_rng(1);
        let mut store = ParamStore::<f32>::new();
        let l = Linear::new(&mut store, "l", 2, 2, false, Group::Language, &mut rng);
        let _ = Linear::new(&mut store, "h", 2, 2, false, Group::VisionHead, &mut rng);
        let head = store.checksum(&[Group::VisionHead]);
        let lang = store.checksum(&[Group::Language]);
        store.value_mut(l.weight).data_mut()[0] += 1.0;
        assert_eq!(store.checksum(&[Group::VisionHead]), head);
        assert_ne!(store.checksum(&[Group::Language]), lang);
    }
}
