use serde::{Deserialize, Serialize};

use super::{check_theta, AnalyticPosterior, DataShape, GenerativeModel};
use crate::dist::{beta, sample_mv_student_t, sample_mvn, sample_niw};
use crate::error::{invalid, Error, Result};
use crate::linalg::{cholesky, outer_self};
use crate::rng::RngState;
use crate::tensor::Tensor;

pub const NIW_DIM: usize = 5;
const CHOL_LEN: usize = NIW_DIM * (NIW_DIM + 1) / 2;

fn zero5() -> Vec<f64> {
    vec![0.0; NIW_DIM]
}
fn one() -> f64 {
    1.0
}
fn five() -> f64 {
    5.0
}
fn ten() -> f64 {
    10.0
}
fn k50() -> usize {
    50
}
fn lo() -> f64 {
    -3.0
}
fn hi() -> f64 {
    3.0
}

/// Five-dimensional Gaussian with unknown mean and covariance under a
/// normal-inverse-Wishart prior `NIW(μ0, λ0, τ0 I, ν0)`.
///
/// Knobs: prior location `mu0` and scale `tau0`; `df` switches the simulator
/// to a multivariate Student-t with scale matrix Σ; `lambda` mixes in Beta
/// noise as in the bivariate model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Niw5dConfig {
    #[serde(default = "zero5")]
    pub mu0: Vec<f64>,
    #[serde(default = "five")]
    pub lambda0: f64,
    #[serde(default = "one")]
    pub tau0: f64,
    #[serde(default = "ten")]
    pub nu0: f64,
    #[serde(default)]
    pub df: Option<f64>,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default = "lo")]
    pub noise_lo: f64,
    #[serde(default = "hi")]
    pub noise_hi: f64,
    #[serde(default = "k50")]
    pub k: usize,
}

impl Default for Niw5dConfig {
    fn default() -> Self {
        Self {
            mu0: zero5(),
            lambda0: 5.0,
            tau0: 1.0,
            nu0: 10.0,
            df: None,
            lambda: 0.0,
            noise_lo: lo(),
            noise_hi: hi(),
            k: k50(),
        }
    }
}

/// Parameters are `μ` followed by the log-Cholesky factor of `Σ`: the
/// row-major lower triangle of `L` with its diagonal on the log scale.
#[derive(Clone, Debug)]
pub struct Niw5d {
    pub config: Niw5dConfig,
    psi0: Tensor,
}

impl Niw5d {
    pub fn new(config: Niw5dConfig) -> Result<Self> {
        let c = &config;
        if c.mu0.len() != NIW_DIM
            || !(c.lambda0 > 0.0)
            || !(c.tau0 > 0.0)
            || !(c.nu0 > NIW_DIM as f64 - 1.0)
        {
            return Err(invalid(
                "niw5d: need 5-dim mu0, lambda0 > 0, tau0 > 0 and nu0 > 4",
            ));
        }
        if let Some(df) = c.df {
            if !(df >= 1.0 && df.fract() == 0.0) {
                return Err(invalid(format!(
                    "niw5d: df must be a positive integer, got {df}"
                )));
            }
        }
        if !(0.0..=1.0).contains(&c.lambda) || !(c.noise_lo < c.noise_hi) || c.k == 0 {
            return Err(invalid(
                "niw5d: need lambda in [0, 1], noise_lo < noise_hi and k >= 1",
            ));
        }
        let mut psi0 = Tensor::identity(NIW_DIM);
        psi0.data_mut().iter_mut().for_each(|v| *v *= c.tau0);
        Ok(Self { config, psi0 })
    }
}

/// Packs `Σ` into its log-Cholesky vector.
pub fn log_cholesky(sigma: &Tensor) -> Result<Vec<f64>> {
    let l = cholesky(sigma)?;
    let d = l.rows();
    let mut out = Vec::with_capacity(d * (d + 1) / 2);
    for i in 0..d {
        for j in 0..=i {
            out.push(if i == j {
                l.get(i, i).ln()
            } else {
                l.get(i, j)
            });
        }
    }
    Ok(out)
}

/// Inverse of [`log_cholesky`].
pub fn unpack_log_cholesky(v: &[f64], d: usize) -> Result<Tensor> {
    if v.len() != d * (d + 1) / 2 {
        return Err(Error::Shape {
            op: "unpack_log_cholesky",
            lhs: vec![v.len()],
            rhs: vec![d * (d + 1) / 2],
        });
    }
    let mut l = Tensor::zeros(&[d, d]);
    let mut it = v.iter();
    for i in 0..d {
        for j in 0..=i {
            let x = *it.next().expect("length checked");
            l.set(i, j, if i == j { x.exp() } else { x });
        }
    }
    Ok(outer_self(&l))
}

impl GenerativeModel for Niw5d {
    fn name(&self) -> &'static str {
        "niw5d"
    }

    fn theta_dim(&self) -> usize {
        NIW_DIM + CHOL_LEN
    }

    fn param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (1..=NIW_DIM).map(|i| format!("mu_{i}")).collect();
        for i in 0..NIW_DIM {
            for j in 0..=i {
                names.push(format!("L_{}{}", i + 1, j + 1));
            }
        }
        names
    }

    fn data_shape(&self) -> DataShape {
        DataShape::Set {
            k: self.config.k,
            d: NIW_DIM,
        }
    }

    fn sample_prior(&self, rng: &mut RngState) -> Result<Vec<f64>> {
        let c = &self.config;
        let (mu, sigma) = sample_niw(rng, &c.mu0, c.lambda0, &self.psi0, c.nu0)?;
        let mut theta = mu;
        theta.extend(log_cholesky(&sigma)?);
        Ok(theta)
    }

    fn simulate(&self, rng: &mut RngState, theta: &[f64]) -> Result<Tensor> {
        check_theta(theta, self.theta_dim(), self.name())?;
        let c = &self.config;
        let mu = &theta[..NIW_DIM];
        let sigma = unpack_log_cholesky(&theta[NIW_DIM..], NIW_DIM)?;
        let chol = cholesky(&sigma)?;
        let mut x = match c.df {
            None => sample_mvn(rng, mu, &chol, c.k)?,
            Some(df) => sample_mv_student_t(rng, df, mu, &chol, c.k)?,
        };
        if c.lambda > 0.0 {
            let width = c.noise_hi - c.noise_lo;
            for i in 0..c.k {
                if rng.uniform() < c.lambda {
                    for v in x.row_mut(i) {
                        *v = c.noise_lo + width * beta(rng, 2.0, 5.0);
                    }
                }
            }
        }
        Ok(x)
    }

    fn analytic_posterior(&self, x: &Tensor) -> Option<Result<AnalyticPosterior>> {
        let c = &self.config;
        Some(niw_posterior(x, &c.mu0, c.lambda0, &self.psi0, c.nu0).map(AnalyticPosterior::Niw))
    }
}

/// Posterior NIW parameters and the marginal means `E[μ] = μ_K`,
/// `E[Σ] = Ψ_K / (ν_K − D − 1)` (the latter only when `ν_K > D + 1`).
#[derive(Clone, Debug, PartialEq)]
pub struct NiwPosterior {
    pub mu_k: Vec<f64>,
    pub lambda_k: f64,
    pub psi_k: Tensor,
    pub nu_k: f64,
    pub mean_mu: Vec<f64>,
    pub mean_sigma: Option<Tensor>,
}

pub fn niw_posterior(
    x: &Tensor,
    mu0: &[f64],
    lambda0: f64,
    psi0: &Tensor,
    nu0: f64,
) -> Result<NiwPosterior> {
    let d = mu0.len();
    let k = if x.is_empty() { 0 } else { x.rows() };
    if k > 0 && x.cols() != d {
        return Err(invalid(format!(
            "data width {} does not match prior dimension {d}",
            x.cols()
        )));
    }
    let kf = k as f64;
    let xbar = if k > 0 {
        x.column_means()
    } else {
        mu0.to_vec()
    };
    let lambda_k = lambda0 + kf;
    let nu_k = nu0 + kf;
    let mu_k: Vec<f64> = (0..d)
        .map(|j| (lambda0 * mu0[j] + kf * xbar[j]) / lambda_k)
        .collect();
    let mut psi_k = psi0.clone();
    let shrink = lambda0 * kf / lambda_k;
    for a in 0..d {
        for b in 0..d {
            let scatter: f64 = (0..k)
                .map(|i| (x.get(i, a) - xbar[a]) * (x.get(i, b) - xbar[b]))
                .sum();
            let prior = shrink * (xbar[a] - mu0[a]) * (xbar[b] - mu0[b]);
            psi_k.set(a, b, psi_k.get(a, b) + scatter + prior);
        }
    }
    let denom = nu_k - d as f64 - 1.0;
    let mean_sigma = (denom > 0.0).then(|| psi_k.map(|v| v / denom));
    Ok(NiwPosterior {
        mean_mu: mu_k.clone(),
        mu_k,
        lambda_k,
        psi_k,
        nu_k,
        mean_sigma,
    })
}
