//! Dense layers and multilayer perceptrons on the autodiff tape.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Bindings, Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Softplus,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Tanh => g.tanh(x),
            Activation::Softplus => g.softplus(x),
        }
    }
}

/// Where layer parameters come from: freshly initialized into a store, or
/// looked up by name in an existing (e.g. loaded) store.
pub enum ParamSource<'a> {
    Init(&'a mut ParamStore, &'a mut RngState),
    Attach(&'a ParamStore),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightInit {
    Glorot,
    Zero,
}

impl ParamSource<'_> {
    fn tensor(&mut self, name: String, shape: &[usize], init: WeightInit) -> Result<ParamId> {
        match self {
            ParamSource::Init(store, rng) => {
                let t = match init {
                    WeightInit::Zero => Tensor::zeros(shape),
                    WeightInit::Glorot => {
                        let limit = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                        let n = shape.iter().product();
                        Tensor::new(
                            shape.to_vec(),
                            (0..n)
                                .map(|_| limit * (2.0 * rng.uniform() - 1.0))
                                .collect(),
                        )?
                    }
                };
                store.add(name, t)
            }
            ParamSource::Attach(store) => {
                let id = store
                    .id(&name)
                    .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter {name}")))?;
                if store.get(id).shape() != shape {
                    return Err(Error::Format(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        store.get(id).shape()
                    )));
                }
                Ok(id)
            }
        }
    }
}

/// Affine map `x W + b` on row-major batches.
#[derive(Clone, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl Dense {
    pub fn new(
        src: &mut ParamSource,
        name: &str,
        input_dim: usize,
        output_dim: usize,
        init: WeightInit,
    ) -> Result<Self> {
        let w = src.tensor(format!("{name}.w"), &[input_dim, output_dim], init)?;
        let b = src.tensor(format!("{name}.b"), &[output_dim], WeightInit::Zero)?;
        Ok(Self {
            w,
            b,
            input_dim,
            output_dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bindings, x: Var) -> Result<Var> {
        let h = g.matmul(x, p[self.w])?;
        g.add(h, p[self.b])
    }
}

/// Hidden layers with a nonlinearity followed by an affine output layer.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub activation: Activation,
}

impl Mlp {
    /// `zero_output` initializes the final layer to zero so the map starts
    /// at the constant zero function.
    pub fn new(
        src: &mut ParamSource,
        name: &str,
        input_dim: usize,
        hidden: &[usize],
        output_dim: usize,
        activation: Activation,
        zero_output: bool,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut d = input_dim;
        for (i, &h) in hidden.iter().enumerate() {
            layers.push(Dense::new(
                src,
                &format!("{name}.{i}"),
                d,
                h,
                WeightInit::Glorot,
            )?);
            d = h;
        }
        let init = if zero_output {
            WeightInit::Zero
        } else {
            WeightInit::Glorot
        };
        layers.push(Dense::new(
            src,
            &format!("{name}.out"),
            d,
            output_dim,
            init,
        )?);
        Ok(Self { layers, activation })
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.output_dim)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bindings, mut x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, p, x)?;
            if i < last {
                x = self.activation.apply(g, x);
            }
        }
        Ok(x)
    }

    /// Hidden-only stack: every layer, including the last, is followed by the activation.
    pub fn forward_all_activated(&self, g: &mut Graph, p: &Bindings, mut x: Var) -> Result<Var> {
        for layer in &self.layers {
            x = layer.forward(g, p, x)?;
            x = self.activation.apply(g, x);
        }
        Ok(x)
    }
}
