//! Network definitions.
//!
//! Modules only hold parameter names and hyperparameters. Values live in a
//! [`ParamStore`], which is bound to a [`Tape`] for each forward pass; this
//! keeps the topology independent of the element type so the same network
//! runs in `f32` for training and `f64` for gradient checks.

mod block;
mod fusion;
mod model;
mod prompt;
mod restoration;

pub use block::TransformerBlock;
pub use fusion::{Fusion, FusionOptions, FusionOut, FusionStage};
pub use model::{Ablation, Forward, Inference, Model, ModelConfig, Network};
pub use prompt::{difference_features, Encoder, PromptEmbed, PromptGen};
pub use restoration::{haze_guided_blend, Restoration, RestorationOut};

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Grads, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
}

/// Named, ordered parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Real = f32> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a tensor under a fresh name.
    pub fn insert(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.values.push(value);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.values[i])
    }

    /// Parameters in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Replaces every value with the same-named tensor from `other`, which
    /// must hold exactly the same names and shapes.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} parameters, model expects {}",
                other.len(),
                self.len()
            )));
        }
        for (i, name) in self.names.iter().enumerate() {
            let v = other
                .get(name)
                .ok_or_else(|| Error::Format(format!("checkpoint is missing parameter {name}")))?;
            if v.shape() != self.values[i].shape() {
                return Err(Error::Format(format!(
                    "parameter {name} has shape {}, model expects {}",
                    v.shape(),
                    self.values[i].shape()
                )));
            }
            self.values[i] = v.clone();
        }
        Ok(())
    }

    /// Uses caller-supplied variables (one per parameter, in order) in place
    /// of the stored values.
    pub fn bind_vars<'a>(&'a self, tape: &'a Tape<T>, vars: Vec<Var<T>>) -> Result<Ctx<'a, T>> {
        if vars.len() != self.len() {
            return Err(Error::dim("parameters", self.len(), vars.len()));
        }
        Ok(Ctx {
            tape,
            vars,
            index: &self.index,
        })
    }

    /// Records every parameter on `tape` (as leaves when `track` is set).
    pub fn bind<'a>(&'a self, tape: &'a Tape<T>, track: bool) -> Ctx<'a, T> {
        let vars = self
            .values
            .iter()
            .map(|v| if track { tape.leaf(v.clone()) } else { tape.constant(v.clone()) })
            .collect();
        Ctx {
            tape,
            vars,
            index: &self.index,
        }
    }
}

/// A parameter store bound to a tape for one forward pass.
pub struct Ctx<'a, T: Real> {
    pub tape: &'a Tape<T>,
    vars: Vec<Var<T>>,
    index: &'a HashMap<String, usize>,
}

impl<T: Real> Ctx<'_, T> {
    pub fn param(&self, name: &str) -> &Var<T> {
        &self.vars[self.index[name]]
    }

    /// Gradients of every parameter, zero-filled when unreached.
    pub fn gradients(&self, grads: &Grads<T>) -> Vec<Tensor<T>> {
        self.vars.iter().map(|v| grads.get_or_zeros(v)).collect()
    }
}

/// Registers parameters under a dotted prefix, drawing initial values from a
/// shared generator in registration order.
pub struct Builder<'a> {
    store: &'a mut ParamStore<f64>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore<f64>, rng: &'a mut ChaCha8Rng) -> Self {
        Builder {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn scope<R>(&mut self, name: &str, f: impl FnOnce(&mut Builder<'_>) -> Result<R>) -> Result<R> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        let mut inner = Builder {
            store: self.store,
            rng: self.rng,
            prefix,
        };
        f(&mut inner)
    }

    pub fn param(&mut self, name: &str, shape: Shape, init: Init) -> Result<String> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        let value = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, 1.0),
            Init::Uniform(b) => Tensor::from_fn(shape, |_, _, _| self.rng.gen_range(-b..=b)),
        };
        self.store.insert(&full, value)?;
        Ok(full)
    }
}

/// 2-D convolution layer.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: String,
    pub bias: Option<String>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub k: usize,
    pub groups: usize,
}

impl Conv {
    /// Same-padded, stride-1 convolution with the usual `1/sqrt(fan_in)`
    /// uniform initialisation.
    pub fn new(
        b: &mut Builder<'_>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        groups: usize,
        bias: bool,
    ) -> Result<Self> {
        if groups == 0 || cin % groups != 0 || cout % groups != 0 {
            return Err(Error::Config(format!(
                "{name}: {cin}->{cout} channels do not split into {groups} groups"
            )));
        }
        let fan_in = (cin / groups) * k * k;
        let bound = 1.0 / (fan_in as f64).sqrt();
        b.scope(name, |b| {
            let weight = b.param("weight", Shape::new(cout, cin / groups, k * k), Init::Uniform(bound))?;
            let bias = if bias {
                Some(b.param("bias", Shape::new(cout, 1, 1), Init::Uniform(bound))?)
            } else {
                None
            };
            Ok(Conv {
                weight,
                bias,
                in_channels: cin,
                out_channels: cout,
                k,
                groups,
            })
        })
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        if x.shape().c != self.in_channels {
            return Err(Error::dim("channels", self.in_channels, x.shape().c));
        }
        ctx.tape.conv2d(
            x,
            ctx.param(&self.weight),
            self.bias.as_ref().map(|b| ctx.param(b)),
            self.k,
            1,
            self.k / 2,
            self.groups,
        )
    }

    pub fn param_names(&self) -> Vec<&str> {
        let mut v = vec![self.weight.as_str()];
        v.extend(self.bias.as_deref());
        v
    }
}
