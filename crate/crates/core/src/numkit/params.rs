use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Initialization kind for a parameter tensor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Gaussian(f64),
    Zeros,
    Ones,
}

/// A named, trainable tensor.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub requires_grad: bool,
    velocity: Option<Vec<f64>>,
}

/// Sparse per-parameter gradients produced by one backward pass.
#[derive(Clone, Debug, Default)]
pub struct ParamGrads {
    pub(crate) entries: Vec<(ParamId, Vec<f64>)>,
}

impl ParamGrads {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.entries
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, g)| g.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.entries.iter().map(|(p, g)| (*p, g.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Deterministic tensor initialization: the same `(shape, init, seed)` always
/// yields the same buffer.
pub fn init_tensor(shape: &[usize], init: Init, seed: u64) -> Tensor {
    match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::Ones => Tensor::ones(shape),
        Init::Gaussian(sigma) => {
            let n: usize = shape.iter().product();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0, sigma).expect("sigma must be finite and non-negative");
            let data = (0..n).map(|_| normal.sample(&mut rng)).collect();
            Tensor::from_raw(shape.to_vec(), data)
        }
    }
}

/// Mixes a model seed with a parameter name (FNV-1a), so each parameter's
/// initialization is independent of how many parameters precede it.
pub fn param_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Ordered collection of named parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value,
            grad: None,
            requires_grad: true,
            velocity: None,
        });
        Ok(id)
    }

    /// Creates a parameter initialized from `(shape, init, param_seed(seed, name))`.
    pub fn init(&mut self, name: &str, shape: &[usize], init: Init, seed: u64) -> Result<ParamId> {
        let value = init_tensor(shape, init, param_seed(seed, name));
        self.insert(name, value)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    /// Sets `requires_grad` on every parameter whose name starts with `prefix`.
    pub fn set_requires_grad(&mut self, prefix: &str, requires_grad: bool) {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.requires_grad = requires_grad;
        }
    }

    /// Adds `grads` into the stored gradient buffers.
    pub fn accumulate(&mut self, grads: &ParamGrads) -> Result<()> {
        for (id, g) in grads.iter() {
            let p = &mut self.params[id.0];
            if g.len() != p.value.len() {
                return Err(Error::shape("accumulate", p.value.shape(), &[g.len()]));
            }
            match &mut p.grad {
                Some(buf) => {
                    for (b, v) in buf.data_mut().iter_mut().zip(g) {
                        *b += v;
                    }
                }
                None => p.grad = Some(Tensor::from_raw(p.value.shape().to_vec(), g.to_vec())),
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }
}

/// SGD with momentum and L2 weight decay, applied to every parameter with
/// `requires_grad`:
/// `v ← momentum·v + grad + weight_decay·value; value ← value − lr·v`.
/// Gradients are cleared afterwards.
pub fn sgd_step(store: &mut ParamStore, lr: f64, momentum: f64, weight_decay: f64) -> Result<()> {
    if let Some(p) = store
        .params
        .iter()
        .find(|p| p.requires_grad && p.grad.is_none())
    {
        return Err(Error::contract(format!(
            "sgd_step: parameter `{}` has no gradient",
            p.name
        )));
    }
    for p in store.params.iter_mut().filter(|p| p.requires_grad) {
        let grad = p.grad.take().expect("checked above");
        let vel = p.velocity.get_or_insert_with(|| vec![0.0; grad.len()]);
        for ((w, v), g) in p.value.data_mut().iter_mut().zip(vel.iter_mut()).zip(grad.data()) {
            *v = momentum * *v + g + weight_decay * *w;
            *w -= lr * *v;
        }
        if !p.value.all_finite() {
            return Err(Error::NonFinite { op: "sgd_step" });
        }
    }
    store.zero_grads();
    Ok(())
}
