//! Named parameter tensors, grouped by the sub-network that owns them.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::numcore::{Gradients, Tape, Tensor, Var};
use crate::rng::rng_for;

/// Owner of a parameter. Training phases select which groups they update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Group {
    /// Object/subgraph message passing.
    Refine,
    /// Word embeddings, fact encoder, episodic memory and fusion.
    Knowledge,
    /// Object, box and predicate heads.
    Heads,
    Generator,
    Discriminator,
}

impl Group {
    pub const ALL: [Group; 5] = [
        Group::Refine,
        Group::Knowledge,
        Group::Heads,
        Group::Generator,
        Group::Discriminator,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Group::Refine => "refine",
            Group::Knowledge => "knowledge",
            Group::Heads => "heads",
            Group::Generator => "generator",
            Group::Discriminator => "discriminator",
        }
    }
}

/// Set of groups, used to choose which parameters are differentiable in a pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GroupMask(u8);

impl GroupMask {
    pub const NONE: GroupMask = GroupMask(0);

    pub fn of(groups: &[Group]) -> Self {
        groups.iter().fold(GroupMask(0), |m, g| m.with(*g))
    }

    pub fn all() -> Self {
        Self::of(&Group::ALL)
    }

    pub fn with(self, g: Group) -> Self {
        GroupMask(self.0 | (1 << g as u8))
    }

    pub fn contains(self, g: Group) -> bool {
        self.0 & (1 << g as u8) != 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: Group,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Init {
    Zeros,
    /// Uniform in `±1/sqrt(fan_in)`.
    FanIn(usize),
    Uniform(f64),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter drawn from its own seeded stream keyed by `name`,
    /// so the values do not depend on which other parameters exist.
    pub fn register(&mut self, name: &str, group: Group, shape: &[usize], init: Init, seed: u64) -> ParamId {
        assert!(!self.by_name.contains_key(name), "duplicate parameter {name}");
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::FanIn(fan_in) => uniform(seed, name, n, 1.0 / crate::math::sqrt(fan_in.max(1) as f64)),
            Init::Uniform(a) => uniform(seed, name, n, a),
        };
        let tensor = Tensor::new(shape, data).expect("parameter shape").with_grad();
        self.insert(name, group, tensor)
    }

    pub fn insert(&mut self, name: &str, group: Group, tensor: Tensor) -> ParamId {
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            group,
            tensor,
        });
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn count_scalars(&self, mask: GroupMask) -> usize {
        self.params
            .iter()
            .filter(|p| mask.contains(p.group))
            .map(|p| p.tensor.len())
            .sum()
    }

    /// Replaces the values of a named parameter, checking the shape.
    pub fn set(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::invalid("params", alloc::format!("unknown parameter {name}")))?;
        let t = &mut self.params[id.0].tensor;
        if t.shape() != shape || t.len() != data.len() {
            return Err(Error::dims("params", t.shape(), shape));
        }
        t.data_mut().copy_from_slice(&data);
        Ok(())
    }
}

fn uniform(seed: u64, name: &str, n: usize, a: f64) -> Vec<f64> {
    if a == 0.0 {
        return vec![0.0; n];
    }
    let mut rng = rng_for(seed, name, 0);
    let dist = Uniform::new_inclusive(-a, a).expect("finite bound");
    (0..n).map(|_| dist.sample(&mut rng)).collect()
}

/// Per-parameter gradients aligned with a [`ParamStore`]; `None` where a
/// parameter was not differentiable in the pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub grads: Vec<Option<Vec<f64>>>,
}

impl ParamGrads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: vec![None; store.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    /// `self += scale * other`, parameter by parameter.
    pub fn add_scaled(&mut self, other: &ParamGrads, scale: f64) {
        for (dst, src) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(src) = src {
                let d = dst.get_or_insert_with(|| vec![0.0; src.len()]);
                d.iter_mut().zip(src).for_each(|(a, b)| *a += scale * b);
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

/// A forward pass: a tape plus lazily bound parameter leaves.
///
/// Each parameter is bound at most once per session, so reusing it in several
/// places accumulates its gradient.
pub struct Session<'p> {
    pub tape: Tape,
    params: &'p ParamStore,
    bound: Vec<Option<Var>>,
    trainable: GroupMask,
}

impl<'p> Session<'p> {
    pub fn new(params: &'p ParamStore, trainable: GroupMask) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
            trainable,
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn trainable(&self) -> GroupMask {
        self.trainable
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let param = &self.params.params[id.0];
        let v = if self.trainable.contains(param.group) {
            self.tape.leaf(&param.tensor)
        } else {
            let t = &param.tensor;
            self.tape
                .constant(t.shape(), t.data().to_vec())
                .expect("parameter tensors are well formed")
        };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn param_grads(&self, grads: &Gradients) -> ParamGrads {
        let grads = self
            .bound
            .iter()
            .enumerate()
            .map(|(i, b)| match b {
                Some(v) if self.trainable.contains(self.params.params[i].group) => grads.get(*v).map(|g| g.to_vec()),
                _ => None,
            })
            .collect();
        ParamGrads { grads }
    }

    /// Runs the backward sweep from `loss` and collects parameter gradients.
    pub fn backward(&self, loss: Var) -> Result<ParamGrads> {
        let grads = self.tape.backward(loss)?;
        Ok(self.param_grads(&grads))
    }
}
