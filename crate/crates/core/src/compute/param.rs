use super::tape::{Grads, Tape, Var};
use super::tensor::Tensor;

/// A learnable tensor together with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

impl Parameter {
    pub fn new(value: Tensor, trainable: bool) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter {
            value,
            grad,
            trainable,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Ordered, named collection of parameters.
///
/// Insertion order is stable and is the order used by checkpoints.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    params: Vec<Parameter>,
}

/// Tape handles for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
    tracked: Vec<bool>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.params.push(Parameter::new(value, trainable));
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    /// Sets `trainable` on every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for (name, p) in self.names.iter().zip(&mut self.params) {
            if name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    /// Places every parameter on the tape. Trainable parameters become
    /// gradient-tracking leaves, the rest enter as constants.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        self.bind_with(tape, |_, p| p.trainable)
    }

    /// Binds every parameter as a constant (no gradients computed for them).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        self.bind_with(tape, |_, _| false)
    }

    pub fn bind_with(&self, tape: &mut Tape, track: impl Fn(&str, &Parameter) -> bool) -> Bound {
        let mut vars = Vec::with_capacity(self.params.len());
        let mut tracked = Vec::with_capacity(self.params.len());
        for (name, p) in self.names.iter().zip(&self.params) {
            let t = track(name, p);
            vars.push(if t {
                tape.leaf(p.value.clone())
            } else {
                tape.constant(p.value.clone())
            });
            tracked.push(t);
        }
        Bound { vars, tracked }
    }

    /// Adds the gradients of the tracked parameters into `Parameter::grad`.
    pub fn accumulate(&mut self, grads: &Grads, bound: &Bound) {
        for (i, p) in self.params.iter_mut().enumerate() {
            if !bound.tracked[i] {
                continue;
            }
            if let Some(g) = grads.get(bound.vars[i]) {
                p.grad.add_assign(g);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn scale_grad(&mut self, factor: f64) {
        for p in &mut self.params {
            p.grad.scale_assign(factor);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.grad.data().iter().map(|g| g * g).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn grads_finite(&self) -> bool {
        self.params.iter().all(|p| p.grad.all_finite())
    }

    /// Total number of scalar entries over all parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Copies values of same-named, same-shaped parameters from `other`.
    /// Returns the number of parameters copied.
    pub fn copy_matching(&mut self, other: &ParamStore, rename: impl Fn(&str) -> Option<String>) -> usize {
        let mut copied = 0;
        for (name, p) in self.names.iter().zip(&mut self.params) {
            let Some(src_name) = rename(name) else { continue };
            if let Some(src) = other.find(&src_name) {
                let src = other.get(src);
                if src.value.shape() == p.value.shape() {
                    p.value = src.value.clone();
                    copied += 1;
                }
            }
        }
        copied
    }
}
