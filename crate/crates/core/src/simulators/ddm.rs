use serde::{Deserialize, Serialize};

use super::{check_theta, DataShape, GenerativeModel};
use crate::dist::standard_gamma;
use crate::error::{invalid, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;

/// Columns of a simulated trial row.
pub const DDM_COLUMNS: [&str; 4] = ["rt", "choice", "condition", "censored"];

/// Gamma(shape, scale) prior shared by all five parameters (mean 2.5). A rate
/// reading would put t0 near 10 s, above the 10 s slow-contamination bound.
const PRIOR: (f64, f64) = (5.0, 0.5);

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContaminationMode {
    #[default]
    Fast,
    Slow,
    Both,
}

fn n_trials() -> usize {
    100
}
fn dt() -> f64 {
    0.001
}
fn max_time() -> f64 {
    10.0
}
fn fast_lo() -> f64 {
    0.1
}

/// Two-condition drift-diffusion model with parameters `(v1, v2, a1, a2, t0)`.
///
/// Evidence starts at `a/2` and follows `dx = v dt + sqrt(dt) ξ` until it
/// leaves `(0, a)`; the response time is the passage time plus `t0`. Trials
/// still running after `max_time` are censored there and flagged.
///
/// Contamination replaces a fraction `lambda` of response times, separately
/// per condition and response, with fast guesses `U(0.1, Q10)` or slow
/// responses `U(Q75, max_time)` (quantiles of the uncontaminated group).
/// `Both` splits the fraction equally. Uniform bounds are taken in sorted
/// order, so a quantile beyond the fixed bound still yields a valid interval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DdmConfig {
    #[serde(default = "n_trials")]
    pub n_trials: usize,
    #[serde(default = "dt")]
    pub dt: f64,
    #[serde(default = "max_time")]
    pub max_time: f64,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default)]
    pub mode: ContaminationMode,
}

impl Default for DdmConfig {
    fn default() -> Self {
        Self {
            n_trials: n_trials(),
            dt: dt(),
            max_time: max_time(),
            lambda: 0.0,
            mode: ContaminationMode::Fast,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Ddm {
    pub config: DdmConfig,
}

/// Linear-interpolation quantile of unsorted data, `q` in [0, 1].
fn quantile(xs: &[f64], q: f64) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

fn uniform_between(rng: &mut RngState, a: f64, b: f64) -> f64 {
    let (lo, hi) = (a.min(b), a.max(b));
    lo + (hi - lo) * rng.uniform()
}

impl Ddm {
    pub fn new(config: DdmConfig) -> Result<Self> {
        let c = &config;
        if c.n_trials == 0
            || !(c.dt > 0.0)
            || !(c.max_time > c.dt)
            || !(0.0..=1.0).contains(&c.lambda)
        {
            return Err(invalid(
                "ddm: need n_trials >= 1, dt > 0, max_time > dt, lambda in [0, 1]",
            ));
        }
        Ok(Self { config })
    }

    /// One trial: `(decision time, choice, censored)`.
    fn trial(&self, rng: &mut RngState, v: f64, a: f64) -> (f64, f64, bool) {
        let c = &self.config;
        let sq = c.dt.sqrt();
        let max_steps = (c.max_time / c.dt).round() as u64;
        let mut x = 0.5 * a;
        for step in 1..=max_steps {
            x += v * c.dt + sq * rng.normal();
            if x >= a {
                return (step as f64 * c.dt, 1.0, false);
            }
            if x <= 0.0 {
                return (step as f64 * c.dt, 0.0, false);
            }
        }
        (c.max_time, if x >= 0.5 * a { 1.0 } else { 0.0 }, true)
    }

    fn contaminate(&self, rng: &mut RngState, rows: &mut [[f64; 4]]) {
        let c = &self.config;
        let (fast, slow) = match c.mode {
            ContaminationMode::Fast => (c.lambda, 0.0),
            ContaminationMode::Slow => (0.0, c.lambda),
            ContaminationMode::Both => (0.5 * c.lambda, 0.5 * c.lambda),
        };
        for cond in [0.0, 1.0] {
            for choice in [0.0, 1.0] {
                let mut idx: Vec<usize> = (0..rows.len())
                    .filter(|&i| rows[i][2] == cond && rows[i][1] == choice)
                    .collect();
                if idx.is_empty() {
                    continue;
                }
                let rts: Vec<f64> = idx.iter().map(|&i| rows[i][0]).collect();
                let (q10, q75) = (quantile(&rts, 0.10), quantile(&rts, 0.75));
                let n_fast = (fast * idx.len() as f64).round() as usize;
                let n_slow = ((slow * idx.len() as f64).round() as usize).min(idx.len() - n_fast);
                rng.shuffle(&mut idx);
                for &i in &idx[..n_fast] {
                    rows[i][0] = uniform_between(rng, fast_lo(), q10);
                }
                for &i in &idx[n_fast..n_fast + n_slow] {
                    rows[i][0] = uniform_between(rng, q75, c.max_time);
                }
            }
        }
    }
}

impl GenerativeModel for Ddm {
    fn name(&self) -> &'static str {
        "ddm"
    }

    fn theta_dim(&self) -> usize {
        5
    }

    fn param_names(&self) -> Vec<String> {
        ["v1", "v2", "a1", "a2", "t0"]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }

    fn data_shape(&self) -> DataShape {
        DataShape::Set {
            k: 2 * self.config.n_trials,
            d: DDM_COLUMNS.len(),
        }
    }

    fn positive_params(&self) -> Vec<bool> {
        vec![true; 5]
    }

    fn sample_prior(&self, rng: &mut RngState) -> Result<Vec<f64>> {
        Ok((0..5)
            .map(|_| standard_gamma(rng, PRIOR.0) * PRIOR.1)
            .collect())
    }

    fn simulate(&self, rng: &mut RngState, theta: &[f64]) -> Result<Tensor> {
        check_theta(theta, 5, self.name())?;
        if theta.iter().any(|&v| v <= 0.0) {
            return Err(invalid(format!(
                "ddm: parameters must be positive, got {theta:?}"
            )));
        }
        let n = self.config.n_trials;
        let t0 = theta[4];
        let mut rows = Vec::with_capacity(2 * n);
        for cond in 0..2 {
            let (v, a) = (theta[cond], theta[2 + cond]);
            for _ in 0..n {
                let (t, choice, censored) = self.trial(rng, v, a);
                rows.push([
                    t + t0,
                    choice,
                    cond as f64,
                    if censored { 1.0 } else { 0.0 },
                ]);
            }
        }
        if self.config.lambda > 0.0 {
            self.contaminate(rng, &mut rows);
        }
        Tensor::new(vec![2 * n, 4], rows.into_iter().flatten().collect())
    }
}
