//! Samplers for every distribution the simulators need.
//!
//! Gamma uses Marsaglia-Tsang (with the `U^{1/a}` boost for shape < 1),
//! Beta is a ratio of two Gammas, Student-t is a normal over the root of a
//! scaled chi-square, Poisson uses multiplication of uniforms for small rates
//! and Hörmann's PTRS transformed rejection above that. The inverse-Wishart
//! draw uses the Bartlett decomposition of the matching Wishart.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{invalid, Error, Result};
use crate::linalg::{cholesky, outer_self, spd_inverse};
use crate::rng::RngState;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ScalarDist {
    Gaussian {
        mean: f64,
        sd: f64,
    },
    Beta {
        a: f64,
        b: f64,
    },
    /// Shape / rate parameterization: mean = shape / rate.
    Gamma {
        shape: f64,
        rate: f64,
    },
    StudentT {
        df: f64,
        loc: f64,
        scale: f64,
    },
    Poisson {
        rate: f64,
    },
    Uniform {
        lo: f64,
        hi: f64,
    },
}

impl ScalarDist {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            ScalarDist::Gaussian { mean, sd } => mean.is_finite() && sd > 0.0 && sd.is_finite(),
            ScalarDist::Beta { a, b } => a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite(),
            ScalarDist::Gamma { shape, rate } => {
                shape > 0.0 && rate > 0.0 && shape.is_finite() && rate.is_finite()
            }
            ScalarDist::StudentT { df, loc, scale } => {
                df > 0.0 && scale > 0.0 && loc.is_finite() && scale.is_finite()
            }
            ScalarDist::Poisson { rate } => rate >= 0.0 && rate.is_finite(),
            ScalarDist::Uniform { lo, hi } => lo.is_finite() && hi.is_finite() && lo <= hi,
        };
        if ok {
            Ok(())
        } else {
            Err(invalid(format!(
                "{self:?} has parameters outside their domain"
            )))
        }
    }

    /// One draw; parameters are assumed valid.
    pub fn draw(&self, rng: &mut RngState) -> f64 {
        match *self {
            ScalarDist::Gaussian { mean, sd } => mean + sd * rng.normal(),
            ScalarDist::Beta { a, b } => beta(rng, a, b),
            ScalarDist::Gamma { shape, rate } => standard_gamma(rng, shape) / rate,
            ScalarDist::StudentT { df, loc, scale } => loc + scale * student_t(rng, df),
            ScalarDist::Poisson { rate } => poisson(rng, rate) as f64,
            ScalarDist::Uniform { lo, hi } => lo + (hi - lo) * rng.uniform(),
        }
    }

    pub fn mean(&self) -> Option<f64> {
        match *self {
            ScalarDist::Gaussian { mean, .. } => Some(mean),
            ScalarDist::Beta { a, b } => Some(a / (a + b)),
            ScalarDist::Gamma { shape, rate } => Some(shape / rate),
            ScalarDist::StudentT { df, loc, .. } => (df > 1.0).then_some(loc),
            ScalarDist::Poisson { rate } => Some(rate),
            ScalarDist::Uniform { lo, hi } => Some(0.5 * (lo + hi)),
        }
    }

    pub fn variance(&self) -> Option<f64> {
        match *self {
            ScalarDist::Gaussian { sd, .. } => Some(sd * sd),
            ScalarDist::Beta { a, b } => Some(a * b / ((a + b).powi(2) * (a + b + 1.0))),
            ScalarDist::Gamma { shape, rate } => Some(shape / (rate * rate)),
            ScalarDist::StudentT { df, scale, .. } => {
                (df > 2.0).then(|| scale * scale * df / (df - 2.0))
            }
            ScalarDist::Poisson { rate } => Some(rate),
            ScalarDist::Uniform { lo, hi } => Some((hi - lo).powi(2) / 12.0),
        }
    }
}

pub fn sample_scalar_dist(rng: &mut RngState, dist: ScalarDist, n: usize) -> Result<Vec<f64>> {
    dist.validate()?;
    Ok((0..n).map(|_| dist.draw(rng)).collect())
}

/// Gamma(shape, 1).
pub fn standard_gamma(rng: &mut RngState, shape: f64) -> f64 {
    if shape < 1.0 {
        let g = standard_gamma(rng, shape + 1.0);
        return g * rng.uniform_open0().powf(1.0 / shape);
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x = rng.normal();
        let v = 1.0 + c * x;
        if v <= 0.0 {
            continue;
        }
        let v = v * v * v;
        let u = rng.uniform_open0();
        if u < 1.0 - 0.0331 * x.powi(4) || u.ln() < 0.5 * x * x + d * (1.0 - v + v.ln()) {
            return d * v;
        }
    }
}

pub fn beta(rng: &mut RngState, a: f64, b: f64) -> f64 {
    let x = standard_gamma(rng, a);
    let y = standard_gamma(rng, b);
    x / (x + y)
}

/// Chi-square with `df` degrees of freedom.
pub fn chi_square(rng: &mut RngState, df: f64) -> f64 {
    2.0 * standard_gamma(rng, 0.5 * df)
}

/// Standard Student-t: `Z / sqrt(chi2_df / df)`.
pub fn student_t(rng: &mut RngState, df: f64) -> f64 {
    let z = rng.normal();
    z / (chi_square(rng, df) / df).sqrt()
}

pub fn poisson(rng: &mut RngState, rate: f64) -> u64 {
    if rate <= 0.0 {
        return 0;
    }
    if rate < 10.0 {
        let limit = (-rate).exp();
        let mut k = 0;
        let mut p = rng.uniform_open0();
        while p > limit {
            k += 1;
            p *= rng.uniform_open0();
        }
        return k;
    }
    // PTRS, Hörmann (1993).
    let slam = rate.sqrt();
    let loglam = rate.ln();
    let b = 0.931 + 2.53 * slam;
    let a = -0.059 + 0.02483 * b;
    let inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
    let vr = 0.9277 - 3.6224 / (b - 2.0);
    loop {
        let u = rng.uniform() - 0.5;
        let v = rng.uniform_open0();
        let us = 0.5 - u.abs();
        let k = ((2.0 * a / us + b) * u + rate + 0.43).floor();
        if us >= 0.07 && v <= vr {
            return k as u64;
        }
        if k < 0.0 || (us < 0.013 && v > us) {
            continue;
        }
        if v.ln() + inv_alpha.ln() - (a / (us * us) + b).ln()
            <= -rate + k * loglam - ln_gamma(k + 1.0)
        {
            return k as u64;
        }
    }
}

fn check_chol(mean: &[f64], chol: &Tensor, op: &'static str) -> Result<usize> {
    let d = mean.len();
    if chol.rank() != 2 || chol.shape() != [d, d] {
        return Err(Error::Shape {
            op,
            lhs: vec![d],
            rhs: chol.shape().to_vec(),
        });
    }
    for i in 0..d {
        for j in i + 1..d {
            if chol.get(i, j) != 0.0 {
                return Err(invalid(format!(
                    "{op}: covariance factor is not lower-triangular"
                )));
            }
        }
    }
    Ok(d)
}

/// `n` rows of `mean + L z` with `z ~ N(0, I)`.
pub fn sample_mvn(rng: &mut RngState, mean: &[f64], chol_cov: &Tensor, n: usize) -> Result<Tensor> {
    let d = check_chol(mean, chol_cov, "sample_mvn")?;
    let mut out = Vec::with_capacity(n * d);
    let mut z = vec![0.0; d];
    for _ in 0..n {
        z.iter_mut().for_each(|v| *v = rng.normal());
        push_affine(&mut out, mean, chol_cov, &z);
    }
    Tensor::new(vec![n, d], out)
}

/// `n` rows of a multivariate Student-t: `mean + L z / sqrt(chi2_df / df)`.
pub fn sample_mv_student_t(
    rng: &mut RngState,
    df: f64,
    mean: &[f64],
    chol_scale: &Tensor,
    n: usize,
) -> Result<Tensor> {
    let d = check_chol(mean, chol_scale, "sample_mv_student_t")?;
    if !(df > 0.0) {
        return Err(invalid(format!("student-t df must be positive, got {df}")));
    }
    let mut out = Vec::with_capacity(n * d);
    let mut z = vec![0.0; d];
    for _ in 0..n {
        z.iter_mut().for_each(|v| *v = rng.normal());
        let w = (chi_square(rng, df) / df).sqrt();
        z.iter_mut().for_each(|v| *v /= w);
        push_affine(&mut out, mean, chol_scale, &z);
    }
    Tensor::new(vec![n, d], out)
}

fn push_affine(out: &mut Vec<f64>, mean: &[f64], l: &Tensor, z: &[f64]) {
    let d = mean.len();
    for i in 0..d {
        let row = l.row(i);
        let mut s = mean[i];
        for j in 0..=i {
            s += row[j] * z[j];
        }
        out.push(s);
    }
}

/// Inverse-Wishart(Ψ, ν) via Bartlett: draw `W ~ Wishart(Ψ⁻¹, ν)` and invert.
pub fn sample_inverse_wishart(rng: &mut RngState, psi: &Tensor, nu: f64) -> Result<Tensor> {
    let d = psi.rows();
    if !(nu > d as f64 - 1.0) {
        return Err(invalid(format!(
            "inverse-Wishart needs nu > d - 1 = {}, got {nu}",
            d as f64 - 1.0
        )));
    }
    let l = cholesky(&spd_inverse(psi)?)?;
    let mut a = Tensor::zeros(&[d, d]);
    for i in 0..d {
        a.set(i, i, chi_square(rng, nu - i as f64).sqrt());
        for j in 0..i {
            a.set(i, j, rng.normal());
        }
    }
    let la = l.matmul(&a)?;
    let w = outer_self(&la);
    let mut sigma = spd_inverse(&w)?;
    symmetrize(&mut sigma);
    Ok(sigma)
}

fn symmetrize(m: &mut Tensor) {
    let d = m.rows();
    for i in 0..d {
        for j in 0..i {
            let v = 0.5 * (m.get(i, j) + m.get(j, i));
            m.set(i, j, v);
            m.set(j, i, v);
        }
    }
}

/// Normal-inverse-Wishart draw: `Σ ~ IW(Ψ0, ν0)`, `μ ~ N(μ0, Σ / λ0)`.
pub fn sample_niw(
    rng: &mut RngState,
    mu0: &[f64],
    lambda0: f64,
    psi0: &Tensor,
    nu0: f64,
) -> Result<(Vec<f64>, Tensor)> {
    let d = mu0.len();
    if psi0.shape() != [d, d] {
        return Err(Error::Shape {
            op: "sample_niw",
            lhs: vec![d],
            rhs: psi0.shape().to_vec(),
        });
    }
    if !(lambda0 > 0.0) {
        return Err(invalid(format!(
            "NIW precision scaling must be positive, got {lambda0}"
        )));
    }
    let sigma = sample_inverse_wishart(rng, psi0, nu0)?;
    let mut chol = cholesky(&sigma)?;
    let s = lambda0.sqrt();
    chol.data_mut().iter_mut().for_each(|v| *v /= s);
    let mu = sample_mvn(rng, mu0, &chol, 1)?.into_data();
    Ok((mu, sigma))
}
