use serde::{Deserialize, Serialize};

use super::{check_theta, DataShape, GenerativeModel};
use crate::error::{invalid, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;

/// Observation variances of the two-observation process.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanOfTwoVariances(pub f64, pub f64);

/// Two observations `x_i ~ N(μ, σ_i²)` with `μ ~ N(0, prior_var)`.
///
/// With variances `(2, 2)` and `(1, 3)` the sample mean has the same
/// distribution under both processes while the joint law of `(x1, x2)`
/// differs, so a summary consisting of the mean alone cannot tell them apart.
#[derive(Clone, Debug)]
pub struct MeanOfTwo {
    pub variances: MeanOfTwoVariances,
    pub prior_var: f64,
}

impl MeanOfTwo {
    pub fn new(variances: MeanOfTwoVariances, prior_var: f64) -> Result<Self> {
        if !(variances.0 > 0.0 && variances.1 > 0.0 && prior_var >= 0.0) {
            return Err(invalid("mean-of-two: variances must be positive"));
        }
        Ok(Self {
            variances,
            prior_var,
        })
    }

    /// `n` draws of `(x1, x2)` as an `n x 2` matrix.
    pub fn draw_pairs(&self, rng: &mut RngState, n: usize) -> Result<Tensor> {
        let mut out = Vec::with_capacity(2 * n);
        for _ in 0..n {
            let mu = self.sample_prior(rng)?;
            out.extend(self.simulate(rng, &mu)?.into_data());
        }
        Tensor::new(vec![n, 2], out)
    }
}

impl GenerativeModel for MeanOfTwo {
    fn name(&self) -> &'static str {
        "mean_of_two"
    }

    fn theta_dim(&self) -> usize {
        1
    }

    fn param_names(&self) -> Vec<String> {
        vec!["mu".into()]
    }

    fn data_shape(&self) -> DataShape {
        DataShape::Vector { d: 2 }
    }

    fn sample_prior(&self, rng: &mut RngState) -> Result<Vec<f64>> {
        Ok(vec![self.prior_var.sqrt() * rng.normal()])
    }

    fn simulate(&self, rng: &mut RngState, theta: &[f64]) -> Result<Tensor> {
        check_theta(theta, 1, self.name())?;
        let x1 = theta[0] + self.variances.0.sqrt() * rng.normal();
        let x2 = theta[0] + self.variances.1.sqrt() * rng.normal();
        Ok(Tensor::vector(vec![x1, x2]))
    }
}
