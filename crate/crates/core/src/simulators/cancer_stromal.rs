use serde::{Deserialize, Serialize};

use super::{check_theta, DataShape, GenerativeModel};
use crate::dist::{poisson, standard_gamma};
use crate::error::{invalid, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;

/// Feature order of the hand-crafted summary vector.
pub const CS_FEATURES: [&str; 5] = [
    "n_cancer",
    "n_stromal",
    "mean_distance",
    "max_distance",
    "valid",
];

/// Gamma(shape, rate) priors for (λ_c, λ_p, λ_d).
const PRIORS: [(f64, f64); 3] = [(25.0, 0.03), (45.0, 3.0), (5.0, 0.5)];

fn radius() -> f64 {
    0.1
}
fn daughter_sd() -> f64 {
    0.02
}
fn n_dist() -> usize {
    50
}

/// Cancer and stromal cells in the unit square.
///
/// Stromal cells: `Poisson(λ_c)` uniform points. Cancer cells: `Poisson(λ_p)`
/// unobserved parents, each with `Poisson(λ_d)` daughters placed
/// `N(parent, daughter_sd²)` truncated to the square. With probability `pi`
/// per parent, necrosis removes every cancer cell within `necrosis_radius`
/// of it. The observation is five features: cell counts, mean and maximum
/// distance from (up to) `n_distance_cells` stromal cells to their nearest
/// cancer cell, and a validity flag that is 0 when either class is empty
/// (distances are then reported as 0).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CancerStromalConfig {
    #[serde(default)]
    pub pi: f64,
    #[serde(default = "radius")]
    pub necrosis_radius: f64,
    #[serde(default = "daughter_sd")]
    pub daughter_sd: f64,
    #[serde(default = "n_dist")]
    pub n_distance_cells: usize,
}

impl Default for CancerStromalConfig {
    fn default() -> Self {
        Self {
            pi: 0.0,
            necrosis_radius: radius(),
            daughter_sd: daughter_sd(),
            n_distance_cells: n_dist(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CancerStromal {
    pub config: CancerStromalConfig,
}

/// Cell counts from one simulation, before and after necrosis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellCounts {
    pub stromal: usize,
    pub parents: usize,
    pub daughters: usize,
    pub cancer: usize,
}

type Point = (f64, f64);

fn dist2(a: Point, b: Point) -> f64 {
    (a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)
}

impl CancerStromal {
    pub fn new(config: CancerStromalConfig) -> Result<Self> {
        let c = &config;
        if !(0.0..=1.0).contains(&c.pi)
            || !(c.necrosis_radius >= 0.0)
            || !(c.daughter_sd > 0.0)
            || c.n_distance_cells == 0
        {
            return Err(invalid("cancer_stromal: need pi in [0, 1], radius >= 0, daughter_sd > 0, n_distance_cells >= 1"));
        }
        Ok(Self { config })
    }

    /// One simulation returning the feature vector and the cell counts.
    pub fn simulate_detailed(
        &self,
        rng: &mut RngState,
        theta: &[f64],
    ) -> Result<(Vec<f64>, CellCounts)> {
        check_theta(theta, 3, "cancer_stromal")?;
        if theta.iter().any(|&v| v <= 0.0) {
            return Err(invalid(format!(
                "cancer_stromal: rates must be positive, got {theta:?}"
            )));
        }
        let c = &self.config;
        let (lc, lp, ld) = (theta[0], theta[1], theta[2]);
        let n_s = poisson(rng, lc) as usize;
        let stromal: Vec<Point> = (0..n_s).map(|_| (rng.uniform(), rng.uniform())).collect();
        let n_p = poisson(rng, lp) as usize;
        let parents: Vec<Point> = (0..n_p).map(|_| (rng.uniform(), rng.uniform())).collect();
        let mut cancer = Vec::new();
        for &p in &parents {
            let n_d = poisson(rng, ld);
            for _ in 0..n_d {
                cancer.push(loop {
                    let q = (
                        p.0 + c.daughter_sd * rng.normal(),
                        p.1 + c.daughter_sd * rng.normal(),
                    );
                    if (0.0..=1.0).contains(&q.0) && (0.0..=1.0).contains(&q.1) {
                        break q;
                    }
                });
            }
        }
        let daughters = cancer.len();
        if c.pi > 0.0 {
            let r2 = c.necrosis_radius * c.necrosis_radius;
            let necrotic: Vec<Point> = parents
                .iter()
                .copied()
                .filter(|_| rng.uniform() < c.pi)
                .collect();
            cancer.retain(|&q| necrotic.iter().all(|&p| dist2(p, q) > r2));
        }

        let valid = !cancer.is_empty() && !stromal.is_empty();
        let (mut mean_d, mut max_d) = (0.0, 0.0);
        if valid {
            let probes = &stromal[..stromal.len().min(c.n_distance_cells)];
            for &s in probes {
                let nearest = cancer
                    .iter()
                    .map(|&q| dist2(s, q))
                    .fold(f64::INFINITY, f64::min)
                    .sqrt();
                mean_d += nearest;
                max_d = f64::max(max_d, nearest);
            }
            mean_d /= probes.len() as f64;
        }
        let features = vec![
            cancer.len() as f64,
            n_s as f64,
            mean_d,
            max_d,
            if valid { 1.0 } else { 0.0 },
        ];
        let counts = CellCounts {
            stromal: n_s,
            parents: n_p,
            daughters,
            cancer: cancer.len(),
        };
        Ok((features, counts))
    }
}

impl GenerativeModel for CancerStromal {
    fn name(&self) -> &'static str {
        "cancer_stromal"
    }

    fn theta_dim(&self) -> usize {
        3
    }

    fn param_names(&self) -> Vec<String> {
        vec!["lambda_c".into(), "lambda_p".into(), "lambda_d".into()]
    }

    fn data_shape(&self) -> DataShape {
        DataShape::Vector {
            d: CS_FEATURES.len(),
        }
    }

    fn positive_params(&self) -> Vec<bool> {
        vec![true; 3]
    }

    fn sample_prior(&self, rng: &mut RngState) -> Result<Vec<f64>> {
        Ok(PRIORS
            .iter()
            .map(|&(a, b)| standard_gamma(rng, a) / b)
            .collect())
    }

    fn simulate(&self, rng: &mut RngState, theta: &[f64]) -> Result<Tensor> {
        let (features, _) = self.simulate_detailed(rng, theta)?;
        Ok(Tensor::vector(features))
    }
}
