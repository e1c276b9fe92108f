use serde::{Deserialize, Serialize};

use super::{check_theta, AnalyticPosterior, DataShape, GenerativeModel};
use crate::dist::beta;
use crate::error::{invalid, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;

fn zero2() -> Vec<f64> {
    vec![0.0, 0.0]
}
fn one() -> f64 {
    1.0
}
fn k100() -> usize {
    100
}
fn lo() -> f64 {
    -3.0
}
fn hi() -> f64 {
    3.0
}

/// Means of a bivariate Gaussian with known isotropic covariance.
///
/// Training model: `μ ~ N(μ0, τ0 I)`, `x_k ~ N(μ, τ I)` with `μ0 = 0`,
/// `τ0 = τ = 1`. With probability `lambda` an observation is replaced by
/// per-coordinate Beta(2, 5) noise mapped onto `[noise_lo, noise_hi]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Gaussian2dConfig {
    #[serde(default = "zero2")]
    pub mu0: Vec<f64>,
    #[serde(default = "one")]
    pub tau0: f64,
    #[serde(default = "one")]
    pub tau: f64,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default = "lo")]
    pub noise_lo: f64,
    #[serde(default = "hi")]
    pub noise_hi: f64,
    #[serde(default = "k100")]
    pub k: usize,
}

impl Default for Gaussian2dConfig {
    fn default() -> Self {
        Self {
            mu0: zero2(),
            tau0: 1.0,
            tau: 1.0,
            lambda: 0.0,
            noise_lo: lo(),
            noise_hi: hi(),
            k: k100(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Gaussian2d {
    pub config: Gaussian2dConfig,
}

impl Gaussian2d {
    pub fn new(config: Gaussian2dConfig) -> Result<Self> {
        let c = &config;
        if c.mu0.len() != 2 || c.mu0.iter().any(|v| !v.is_finite()) {
            return Err(invalid("gaussian2d: mu0 must be a finite 2-vector"));
        }
        if !(c.tau0 >= 0.0 && c.tau0.is_finite()) || !(c.tau > 0.0 && c.tau.is_finite()) {
            return Err(invalid(format!(
                "gaussian2d: need tau0 >= 0 and tau > 0, got {} and {}",
                c.tau0, c.tau
            )));
        }
        if !(0.0..=1.0).contains(&c.lambda) || !(c.noise_lo < c.noise_hi) || c.k == 0 {
            return Err(invalid(
                "gaussian2d: need lambda in [0, 1], noise_lo < noise_hi and k >= 1",
            ));
        }
        Ok(Self { config })
    }
}

impl GenerativeModel for Gaussian2d {
    fn name(&self) -> &'static str {
        "gaussian2d"
    }

    fn theta_dim(&self) -> usize {
        2
    }

    fn param_names(&self) -> Vec<String> {
        vec!["mu_1".into(), "mu_2".into()]
    }

    fn data_shape(&self) -> DataShape {
        DataShape::Set {
            k: self.config.k,
            d: 2,
        }
    }

    fn sample_prior(&self, rng: &mut RngState) -> Result<Vec<f64>> {
        let s = self.config.tau0.sqrt();
        Ok(self
            .config
            .mu0
            .iter()
            .map(|m| m + s * rng.normal())
            .collect())
    }

    fn simulate(&self, rng: &mut RngState, theta: &[f64]) -> Result<Tensor> {
        check_theta(theta, 2, self.name())?;
        let c = &self.config;
        let sd = c.tau.sqrt();
        let width = c.noise_hi - c.noise_lo;
        let mut out = Vec::with_capacity(c.k * 2);
        for _ in 0..c.k {
            // The mixture draw is skipped entirely at lambda = 0 so the
            // well-specified stream matches the training model exactly.
            let noisy = c.lambda > 0.0 && rng.uniform() < c.lambda;
            for &m in theta {
                out.push(if noisy {
                    c.noise_lo + width * beta(rng, 2.0, 5.0)
                } else {
                    m + sd * rng.normal()
                });
            }
        }
        Tensor::new(vec![c.k, 2], out)
    }

    fn analytic_posterior(&self, x: &Tensor) -> Option<Result<AnalyticPosterior>> {
        let c = &self.config;
        Some(gaussian_conjugate_posterior(x, &c.mu0, c.tau0, c.tau))
    }
}

/// Conjugate update for `x_k ~ N(μ, τ I)`, `μ ~ N(μ0, τ0 I)`:
/// `Σ_K = (I/τ0 + K I/τ)⁻¹`, `μ_K = Σ_K (μ0/τ0 + K x̄/τ)`.
pub fn gaussian_conjugate_posterior(
    x: &Tensor,
    mu0: &[f64],
    tau0: f64,
    tau: f64,
) -> Result<AnalyticPosterior> {
    let d = mu0.len();
    if !(tau0 > 0.0 && tau > 0.0) {
        return Err(invalid("conjugate posterior needs tau0 > 0 and tau > 0"));
    }
    let k = if x.is_empty() { 0 } else { x.rows() };
    if k > 0 && x.cols() != d {
        return Err(invalid(format!(
            "data width {} does not match prior dimension {d}",
            x.cols()
        )));
    }
    let xbar = if k > 0 {
        x.column_means()
    } else {
        vec![0.0; d]
    };
    let prec = 1.0 / tau0 + k as f64 / tau;
    let var = 1.0 / prec;
    let mean = (0..d)
        .map(|j| var * (mu0[j] / tau0 + k as f64 * xbar[j] / tau))
        .collect();
    let mut cov = Tensor::identity(d);
    cov.data_mut().iter_mut().for_each(|v| *v *= var);
    Ok(AnalyticPosterior::GaussianConjugate { mean, cov })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean_cov(p: AnalyticPosterior) -> (Vec<f64>, Tensor) {
        match p {
            AnalyticPosterior::GaussianConjugate { mean, cov } => (mean, cov),
            _ => unreachable!(),
        }
    }

    #[test]
    fn conjugate_hand_values() {
        let x = Tensor::new(vec![100, 2], vec![1.0; 200]).unwrap();
        let (m, c) = mean_cov(gaussian_conjugate_posterior(&x, &[0.0, 0.0], 1.0, 1.0).unwrap());
        assert!((m[0] - 100.0 / 101.0).abs() < 1e-12 && (m[1] - 100.0 / 101.0).abs() < 1e-12);
        assert!((c.get(0, 0) - 1.0 / 101.0).abs() < 1e-15 && c.get(0, 1) == 0.0);

        let empty = Tensor::zeros(&[0, 2]);
        let (m, c) =
            mean_cov(gaussian_conjugate_posterior(&empty, &[0.5, -1.0], 2.0, 1.0).unwrap());
        assert_eq!(m, vec![0.5, -1.0]);
        assert_eq!(c.get(1, 1), 2.0);

        let (m, _) = mean_cov(gaussian_conjugate_posterior(&x, &[5.0, 5.0], 1e12, 1.0).unwrap());
        assert!((m[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn conjugate_mean_matches_grid_quadrature() {
        // One coordinate of one instance, integrated on a fine grid.
        let mut rng = RngState::new(17);
        let model = Gaussian2d::new(Gaussian2dConfig::default()).unwrap();
        let x = model.simulate(&mut rng, &[0.7, -0.2]).unwrap();
        let (m, c) = mean_cov(model.analytic_posterior(&x).unwrap().unwrap());
        let col: Vec<f64> = (0..x.rows()).map(|i| x.get(i, 0)).collect();
        let log_post =
            |mu: f64| -0.5 * mu * mu - 0.5 * col.iter().map(|v| (v - mu).powi(2)).sum::<f64>();
        let (lo, hi, n) = (-2.0, 3.0, 200_001);
        let step = (hi - lo) / (n - 1) as f64;
        let peak = log_post(m[0]);
        let (mut z, mut first, mut second) = (0.0, 0.0, 0.0);
        for i in 0..n {
            let mu = lo + i as f64 * step;
            let w = (log_post(mu) - peak).exp();
            z += w;
            first += w * mu;
            second += w * mu * mu;
        }
        let mean = first / z;
        assert!((mean - m[0]).abs() < 1e-8);
        assert!((second / z - mean * mean - c.get(0, 0)).abs() < 1e-8);
    }

    #[test]
    fn knob_corners() {
        let mut rng = RngState::new(2);
        let full_noise = Gaussian2d::new(Gaussian2dConfig {
            lambda: 1.0,
            noise_lo: 0.0,
            noise_hi: 1.0,
            ..Default::default()
        })
        .unwrap();
        let x = full_noise.simulate(&mut rng, &[10.0, 10.0]).unwrap();
        assert!(x.data().iter().all(|v| (0.0..=1.0).contains(v)));

        let default_noise = Gaussian2d::new(Gaussian2dConfig {
            lambda: 1.0,
            ..Default::default()
        })
        .unwrap();
        let x = default_noise.simulate(&mut rng, &[10.0, 10.0]).unwrap();
        assert!(x.data().iter().all(|v| (-3.0..=3.0).contains(v)));

        let point_prior = Gaussian2d::new(Gaussian2dConfig {
            mu0: vec![1.5, -0.5],
            tau0: 0.0,
            ..Default::default()
        })
        .unwrap();
        for _ in 0..10 {
            assert_eq!(point_prior.sample_prior(&mut rng).unwrap(), vec![1.5, -0.5]);
        }
        assert!(Gaussian2d::new(Gaussian2dConfig {
            tau: 0.0,
            ..Default::default()
        })
        .is_err());
    }

    #[test]
    fn simulate_is_deterministic() {
        let m = Gaussian2d::new(Gaussian2dConfig {
            lambda: 0.3,
            ..Default::default()
        })
        .unwrap();
        let a = m.simulate(&mut RngState::new(4), &[0.0, 1.0]).unwrap();
        let b = m.simulate(&mut RngState::new(4), &[0.0, 1.0]).unwrap();
        assert_eq!(a, b);
    }
}
