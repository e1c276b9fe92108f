//! Generative models (prior + simulator) with misspecification knobs, and the
//! analytic posteriors available for the conjugate ones.

mod cancer_stromal;
mod counterexample;
mod ddm;
mod gaussian2d;
mod niw5d;

pub use cancer_stromal::{CancerStromal, CancerStromalConfig, CellCounts, CS_FEATURES};
pub use counterexample::{MeanOfTwo, MeanOfTwoVariances};
pub use ddm::{ContaminationMode, Ddm, DdmConfig, DDM_COLUMNS};
pub use gaussian2d::{gaussian_conjugate_posterior, Gaussian2d, Gaussian2dConfig};
pub use niw5d::{
    log_cholesky, niw_posterior, unpack_log_cholesky, Niw5d, Niw5dConfig, NiwPosterior,
};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;

/// Layout of one simulated dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataShape {
    /// `k` exchangeable rows of width `d`.
    Set { k: usize, d: usize },
    /// A single feature vector of length `d`.
    Vector { d: usize },
}

impl DataShape {
    pub fn feature_dim(&self) -> usize {
        match *self {
            DataShape::Set { d, .. } | DataShape::Vector { d } => d,
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        match *self {
            DataShape::Set { k, d } => vec![k, d],
            DataShape::Vector { d } => vec![d],
        }
    }
}

/// Closed-form posterior means under a model's own prior and likelihood.
#[derive(Clone, Debug, PartialEq)]
pub enum AnalyticPosterior {
    GaussianConjugate { mean: Vec<f64>, cov: Tensor },
    Niw(NiwPosterior),
}

/// A prior and a simulator. Implementations are pure functions of the
/// supplied random state.
pub trait GenerativeModel: Send + Sync + std::fmt::Debug {
    fn name(&self) -> &'static str;
    fn theta_dim(&self) -> usize;
    fn param_names(&self) -> Vec<String>;
    fn data_shape(&self) -> DataShape;

    /// Parameters modeled on the log scale by the inference network.
    fn positive_params(&self) -> Vec<bool> {
        vec![false; self.theta_dim()]
    }

    fn sample_prior(&self, rng: &mut RngState) -> Result<Vec<f64>>;
    fn simulate(&self, rng: &mut RngState, theta: &[f64]) -> Result<Tensor>;

    fn analytic_posterior(&self, _x: &Tensor) -> Option<Result<AnalyticPosterior>> {
        None
    }

    /// Posterior mean of θ in the parameterization the network is trained on.
    fn analytic_posterior_mean(&self, x: &Tensor) -> Option<Result<Vec<f64>>> {
        self.analytic_posterior(x).map(|r| {
            r.map(|p| match p {
                AnalyticPosterior::GaussianConjugate { mean, .. } => mean,
                AnalyticPosterior::Niw(n) => n.mean_mu.clone(),
            })
        })
    }

    /// Draws θ from the prior and one dataset given θ.
    fn sample_joint(&self, rng: &mut RngState) -> Result<(Vec<f64>, Tensor)> {
        let theta = self.sample_prior(rng)?;
        let x = self.simulate(rng, &theta)?;
        Ok((theta, x))
    }
}

/// `n` joint draws; draw `j` uses `rng.stream(j)` and results are ordered by `j`.
/// Returns θ `[n, D]` and data `[n, dims...]`.
pub fn simulate_batch(
    model: &dyn GenerativeModel,
    rng: &RngState,
    n: usize,
) -> Result<(Tensor, Tensor)> {
    let draws: Vec<(Vec<f64>, Tensor)> = (0..n)
        .into_par_iter()
        .map(|j| model.sample_joint(&mut rng.stream(j as u64)))
        .collect::<Result<_>>()?;
    stack_draws(model, draws)
}

/// Datasets for fixed parameters, one per row of `thetas`.
pub fn simulate_given(
    model: &dyn GenerativeModel,
    rng: &RngState,
    thetas: &Tensor,
) -> Result<Tensor> {
    let data: Vec<Tensor> = (0..thetas.rows())
        .into_par_iter()
        .map(|j| model.simulate(&mut rng.stream(j as u64), thetas.row(j)))
        .collect::<Result<_>>()?;
    stack_datasets(model.data_shape(), &data)
}

fn stack_draws(
    model: &dyn GenerativeModel,
    draws: Vec<(Vec<f64>, Tensor)>,
) -> Result<(Tensor, Tensor)> {
    let n = draws.len();
    let d = model.theta_dim();
    let mut theta = Vec::with_capacity(n * d);
    let mut data = Vec::with_capacity(n);
    for (t, x) in draws {
        theta.extend_from_slice(&t);
        data.push(x);
    }
    Ok((
        Tensor::new(vec![n, d], theta)?,
        stack_datasets(model.data_shape(), &data)?,
    ))
}

/// Stacks datasets of identical shape into a batch with a leading axis.
pub fn stack_datasets(shape: DataShape, data: &[Tensor]) -> Result<Tensor> {
    let dims = shape.dims();
    let mut out = Vec::with_capacity(data.len() * dims.iter().product::<usize>());
    for x in data {
        if x.shape() != dims.as_slice() {
            return Err(Error::Shape {
                op: "stack_datasets",
                lhs: x.shape().to_vec(),
                rhs: dims.clone(),
            });
        }
        out.extend_from_slice(x.data());
    }
    let mut full = vec![data.len()];
    full.extend(dims);
    Tensor::new(full, out)
}

/// Splits a batch back into its datasets.
pub fn unstack(batch: &Tensor) -> Vec<Tensor> {
    let n = batch.shape()[0];
    let inner = batch.shape()[1..].to_vec();
    let per = inner.iter().product::<usize>();
    (0..n)
        .map(|i| {
            Tensor::new(inner.clone(), batch.data()[i * per..(i + 1) * per].to_vec())
                .expect("consistent shape")
        })
        .collect()
}

/// Serializable model selection with every knob; the default of each knob is
/// the training (well-specified) configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Gaussian2d(Gaussian2dConfig),
    Niw5d(Niw5dConfig),
    CancerStromal(CancerStromalConfig),
    Ddm(DdmConfig),
}

impl ModelSpec {
    pub fn build(&self) -> Result<Box<dyn GenerativeModel>> {
        Ok(match self {
            ModelSpec::Gaussian2d(c) => Box::new(Gaussian2d::new(c.clone())?),
            ModelSpec::Niw5d(c) => Box::new(Niw5d::new(c.clone())?),
            ModelSpec::CancerStromal(c) => Box::new(CancerStromal::new(c.clone())?),
            ModelSpec::Ddm(c) => Box::new(Ddm::new(c.clone())?),
        })
    }

    pub fn family(&self) -> &'static str {
        match self {
            ModelSpec::Gaussian2d(_) => "gaussian2d",
            ModelSpec::Niw5d(_) => "niw5d",
            ModelSpec::CancerStromal(_) => "cancer_stromal",
            ModelSpec::Ddm(_) => "ddm",
        }
    }

    /// Same family with every misspecification knob at its training value.
    pub fn well_specified(&self) -> ModelSpec {
        match self {
            ModelSpec::Gaussian2d(c) => ModelSpec::Gaussian2d(Gaussian2dConfig {
                k: c.k,
                noise_lo: c.noise_lo,
                noise_hi: c.noise_hi,
                ..Gaussian2dConfig::default()
            }),
            ModelSpec::Niw5d(c) => ModelSpec::Niw5d(Niw5dConfig {
                k: c.k,
                noise_lo: c.noise_lo,
                noise_hi: c.noise_hi,
                ..Niw5dConfig::default()
            }),
            ModelSpec::CancerStromal(c) => ModelSpec::CancerStromal(CancerStromalConfig {
                pi: 0.0,
                ..c.clone()
            }),
            ModelSpec::Ddm(c) => ModelSpec::Ddm(DdmConfig {
                lambda: 0.0,
                ..c.clone()
            }),
        }
    }

    /// Sets a knob by name, e.g. `"tau"` or `"mu0"` (which sets every coordinate).
    pub fn with_knob(&self, knob: &str, value: f64) -> Result<ModelSpec> {
        let mut v = serde_json::to_value(self)?;
        let obj = v
            .as_object_mut()
            .expect("tagged enum serializes to an object");
        let slot = obj
            .get_mut(knob)
            .ok_or_else(|| invalid(format!("model family {} has no knob {knob}", self.family())))?;
        *slot = match slot {
            serde_json::Value::Array(a) => {
                serde_json::Value::Array(vec![serde_json::json!(value); a.len()])
            }
            serde_json::Value::Number(n) if n.is_u64() => serde_json::json!(value.round() as u64),
            _ => serde_json::json!(value),
        };
        let spec: ModelSpec = serde_json::from_value(v)?;
        spec.build()?;
        Ok(spec)
    }
}

pub(crate) fn check_theta(theta: &[f64], d: usize, model: &str) -> Result<()> {
    if theta.len() != d {
        return Err(Error::Shape {
            op: "simulate",
            lhs: vec![theta.len()],
            rhs: vec![d],
        });
    }
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(invalid(format!("{model}: non-finite parameter {theta:?}")));
    }
    Ok(())
}
