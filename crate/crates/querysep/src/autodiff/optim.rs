//! Named parameters and the Adam family.

use std::collections::HashMap;

use super::tape::{Gradients, Tape, Var};
use super::{Scalar, Tensor};

/// A named model weight with its gradient accumulator and moment estimates.
#[derive(Debug, Clone)]
pub struct Parameter<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Vec<S>,
    pub trainable: bool,
    pub m: Vec<S>,
    pub v: Vec<S>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Ordered registry of parameters. Order is insertion order and is part of
/// the determinism contract: staging, gradient accumulation and optimizer
/// steps all walk it front to back.
pub struct ParamStore<S> {
    params: Vec<Parameter<S>>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), index: HashMap::new() }
    }

    pub fn add(&mut self, name: &str, value: Tensor<S>, trainable: bool) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let n = value.numel();
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            grad: vec![S::ZERO; n],
            trainable,
            m: vec![S::ZERO; n],
            v: vec![S::ZERO; n],
        });
        self.index.insert(name.to_string(), self.params.len() - 1);
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<S> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<S> {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<S>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<S>> {
        self.params.iter_mut()
    }

    /// Total number of scalar weights marked trainable.
    pub fn trainable_scalars(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }

    /// Flips trainability by predicate over parameter names.
    pub fn set_trainable(&mut self, pred: impl Fn(&str) -> bool) {
        for p in &mut self.params {
            p.trainable = pred(&p.name);
        }
    }

    /// Puts every parameter on the tape. Trainable ones are gradient leaves.
    pub fn stage(&self, tape: &mut Tape<S>) -> Staged {
        Staged {
            vars: self
                .params
                .iter()
                .map(|p| tape.leaf_flagged(p.value.clone(), p.trainable))
                .collect(),
        }
    }

    /// Adds `scale`-weighted gradients from a backward pass into the
    /// accumulators. Parameters absent from the pass are left alone.
    pub fn accumulate(&mut self, staged: &Staged, grads: &mut Gradients<S>, scale: S) {
        for (i, p) in self.params.iter_mut().enumerate() {
            if let Some(g) = grads.take(staged.vars[i]) {
                for (acc, gi) in p.grad.iter_mut().zip(&g.data) {
                    *acc = *acc + scale * *gi;
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            for g in &mut p.grad {
                *g = S::ZERO;
            }
        }
    }
}

/// Tape handles for one staging of the whole store.
pub struct Staged {
    vars: Vec<Var>,
}

impl Staged {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Swaps one parameter's staged variable, e.g. for probing a single
    /// parameter with an externally constructed leaf.
    pub fn replace(&mut self, id: ParamId, var: Var) {
        self.vars[id.0] = var;
    }
}

/// Adam optimizer; a nonzero `weight_decay` makes it AdamW (the decay is
/// decoupled from the moment estimates, scaled by the current lr).
pub struct Adam<S> {
    pub lr: S,
    pub beta1: S,
    pub beta2: S,
    pub eps: S,
    pub weight_decay: S,
    pub t: u64,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: S) -> Self {
        Adam {
            lr,
            beta1: S::from_f64(0.9),
            beta2: S::from_f64(0.999),
            eps: S::from_f64(1e-8),
            weight_decay: S::ZERO,
            t: 0,
        }
    }

    pub fn with_weight_decay(lr: S, weight_decay: S) -> Self {
        Adam { weight_decay, ..Adam::new(lr) }
    }

    /// One update over the trainable parameters selected by name. Frozen or
    /// unselected parameters are not touched at all, moments included.
    pub fn step(&mut self, store: &mut ParamStore<S>, select: impl Fn(&str) -> bool) {
        self.t += 1;
        let bc1 = S::ONE - pow_scalar(self.beta1, self.t);
        let bc2 = S::ONE - pow_scalar(self.beta2, self.t);
        for p in store.iter_mut() {
            if !p.trainable || !select(&p.name) {
                continue;
            }
            for i in 0..p.grad.len() {
                let g = p.grad[i];
                p.m[i] = self.beta1 * p.m[i] + (S::ONE - self.beta1) * g;
                p.v[i] = self.beta2 * p.v[i] + (S::ONE - self.beta2) * g * g;
                let mhat = p.m[i] / bc1;
                let vhat = p.v[i] / bc2;
                let step = mhat / (vhat.sqrt() + self.eps) + self.weight_decay * p.value.data[i];
                p.value.data[i] = p.value.data[i] - self.lr * step;
            }
        }
    }
}

fn pow_scalar<S: Scalar>(base: S, exp: u64) -> S {
    let mut acc = S::ONE;
    let mut b = base;
    let mut e = exp;
    while e > 0 {
        if e & 1 == 1 {
            acc = acc * b;
        }
        b = b * b;
        e >>= 1;
    }
    acc
}
