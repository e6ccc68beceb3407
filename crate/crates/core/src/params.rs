//! Named parameter storage and per-forward tape binding.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use stmixer_tensor::{AdamWConfig, Gradients, Parameter, Tape, Tensor, Var};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter {name}"
        );
        self.params.push(Parameter::new(name, value));
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Registers every parameter on `tape` as a gradient-tracked leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Binding<'t> {
        Binding {
            vars: self.params.iter().map(|p| tape.var(p.value.clone())).collect(),
        }
    }

    /// Registers every parameter as a constant (inference only).
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Binding<'t> {
        Binding {
            vars: self
                .params
                .iter()
                .map(|p| tape.constant(p.value.clone()))
                .collect(),
        }
    }

    /// Applies one AdamW update per parameter. Validates every gradient
    /// before touching any parameter, so a bad gradient leaves the store intact.
    pub fn adamw_step(&mut self, grads: &[Tensor], cfg: &AdamWConfig) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(Error::config(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.params.len()
            )));
        }
        if let Some(p) = self
            .params
            .iter()
            .zip(grads)
            .find_map(|(p, g)| (!g.all_finite()).then_some(p))
        {
            return Err(stmixer_tensor::TensorError::NonFinite {
                name: p.name.clone(),
            }
            .into());
        }
        for (p, g) in self.params.iter_mut().zip(grads) {
            p.adamw_step(g, cfg)?;
        }
        Ok(())
    }

    /// Replaces every value, keyed by name; optimizer state is reset.
    pub fn load_values(&mut self, mut values: Vec<(String, Tensor)>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameters, model has {}",
                values.len(),
                self.params.len()
            )));
        }
        for p in &mut self.params {
            let pos = values
                .iter()
                .position(|(n, _)| n == &p.name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter {}", p.name)))?;
            let (_, v) = values.swap_remove(pos);
            if v.shape() != p.value.shape() {
                return Err(Error::Format(format!(
                    "parameter {}: checkpoint shape {:?}, model shape {:?}",
                    p.name,
                    v.shape(),
                    p.value.shape()
                )));
            }
            *p = Parameter::new(p.name.clone(), v);
        }
        Ok(())
    }
}

pub struct Binding<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Binding<'t> {
    /// Binds externally created vars, one per parameter in store order.
    pub fn from_vars(vars: Vec<Var<'t>>) -> Self {
        Self { vars }
    }

    pub fn get(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    /// Gradients for every parameter, in store order.
    pub fn gradients(&self, grads: &mut Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|&v| grads.take(v)).collect()
    }
}

/// Parameter factory with a name prefix and a shared seeded RNG.
pub struct Init<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: &str) -> Init<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Init {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn name(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            leaf.to_string()
        } else {
            format!("{}.{}", self.prefix, leaf)
        }
    }

    pub fn tensor(&mut self, leaf: &str, value: Tensor) -> ParamId {
        let name = self.name(leaf);
        self.store.add(name, value)
    }

    pub fn zeros(&mut self, leaf: &str, shape: &[usize]) -> ParamId {
        self.tensor(leaf, Tensor::zeros(shape.to_vec()))
    }

    pub fn ones(&mut self, leaf: &str, shape: &[usize]) -> ParamId {
        self.tensor(leaf, Tensor::ones(shape.to_vec()))
    }

    pub fn uniform(&mut self, leaf: &str, shape: &[usize], bound: f64) -> ParamId {
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-bound..=bound));
        self.tensor(leaf, t)
    }

    pub fn normal(&mut self, leaf: &str, shape: &[usize], std: f64) -> ParamId {
        let normal = Normal::new(0.0, std).expect("finite std");
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape.to_vec(), |_| normal.sample(rng));
        self.tensor(leaf, t)
    }

    /// Glorot-uniform weights.
    pub fn xavier(&mut self, leaf: &str, shape: &[usize], fan_in: usize, fan_out: usize) -> ParamId {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.uniform(leaf, shape, bound)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }
}
