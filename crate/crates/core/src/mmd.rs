//! Kernel two-sample machinery on summary vectors.
//!
//! The estimator is the biased V-statistic
//!
//! ```text
//! MMD² = 1/m² ΣᵢΣⱼ κ(aᵢ,aⱼ) + 1/n² ΣᵢΣⱼ κ(bᵢ,bⱼ) − 2/(mn) ΣᵢΣⱼ κ(aᵢ,bⱼ)
//! ```
//!
//! which keeps the diagonal terms and is therefore defined for singleton
//! samples. User-facing values are the square root of the clamped estimate.
//!
//! Null distributions are obtained by resampling a fixed pool of model
//! summaries. Every resampled pair of sets is a weighting `w` of the pool
//! (`counts_a / m − counts_b / n`), so each replicate reduces to the quadratic
//! form `wᵀ K w` on the pool's Gram matrix `K`, computed once.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::RngState;
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    GaussianSum,
    ImqSum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub scales: Vec<f64>,
}

/// Bandwidth multipliers of the default ladder, scaled by `sqrt(S / 2)`.
pub const DEFAULT_LADDER: [f64; 5] = [0.5, 1.0, 2.0, 4.0, 8.0];

impl KernelSpec {
    pub fn new(family: KernelFamily, scales: Vec<f64>) -> Result<Self> {
        let spec = Self { family, scales };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() || self.scales.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(invalid(format!(
                "kernel scales must be non-empty and positive: {:?}",
                self.scales
            )));
        }
        Ok(())
    }

    pub fn gaussian(scales: Vec<f64>) -> Result<Self> {
        Self::new(KernelFamily::GaussianSum, scales)
    }

    pub fn imq(scales: Vec<f64>) -> Result<Self> {
        Self::new(KernelFamily::ImqSum, scales)
    }

    /// Multi-scale ladder for summaries of dimension `dim`.
    pub fn default_for_dim(family: KernelFamily, dim: usize) -> Self {
        let base = (dim.max(1) as f64 / 2.0).sqrt();
        Self {
            family,
            scales: DEFAULT_LADDER.iter().map(|m| m * base).collect(),
        }
    }

    /// Kernel value as a function of the squared distance.
    #[inline]
    pub fn eval_sq(&self, d2: f64) -> f64 {
        match self.family {
            KernelFamily::GaussianSum => self
                .scales
                .iter()
                .map(|s| (-d2 / (2.0 * s * s)).exp())
                .sum(),
            KernelFamily::ImqSum => self.scales.iter().map(|s| s * s / (s * s + d2)).sum(),
        }
    }

    /// Derivative of [`KernelSpec::eval_sq`] with respect to the squared distance.
    #[inline]
    pub fn deriv_sq(&self, d2: f64) -> f64 {
        match self.family {
            KernelFamily::GaussianSum => self
                .scales
                .iter()
                .map(|s| {
                    let c = 1.0 / (2.0 * s * s);
                    -c * (-d2 * c).exp()
                })
                .sum(),
            KernelFamily::ImqSum => self
                .scales
                .iter()
                .map(|s| {
                    let q = s * s + d2;
                    -s * s / (q * q)
                })
                .sum(),
        }
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        if x.len() != y.len() {
            return Err(Error::Shape {
                op: "kernel_eval",
                lhs: vec![x.len()],
                rhs: vec![y.len()],
            });
        }
        Ok(self.eval_sq(sq_dist(x, y)))
    }
}

#[inline]
pub fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn check_pair(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.rows() == 0 || b.rows() == 0 || a.rank() != 2 || b.rank() != 2 {
        return Err(Error::InsufficientSamples(format!(
            "MMD needs two non-empty matrices, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.cols() != b.cols() {
        return Err(Error::Shape {
            op: "mmd",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn canonical_le(a: &Tensor, b: &Tensor) -> bool {
    match a.rows().cmp(&b.rows()) {
        std::cmp::Ordering::Equal => a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .is_none_or(|o| o.is_lt()),
        o => o.is_lt(),
    }
}

fn row_norms(t: &Tensor) -> Vec<f64> {
    (0..t.rows())
        .map(|i| t.row(i).iter().map(|v| v * v).sum())
        .collect()
}

/// Pairwise squared distances between rows, `|x|² + |y|² − 2 x·y`, floored at 0.
pub fn sq_dist_matrix(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, n, d) = (a.rows(), b.rows(), a.cols());
    let mut dot = vec![0.0; m * n];
    gemm(a.data(), m, d, false, b.data(), n, true, &mut dot, false);
    let (na, nb) = (row_norms(a), row_norms(b));
    for i in 0..m {
        for j in 0..n {
            let v = &mut dot[i * n + j];
            *v = (na[i] + nb[j] - 2.0 * *v).max(0.0);
        }
    }
    dot
}

fn mean_kernel(a: &Tensor, b: &Tensor, kernel: &KernelSpec) -> f64 {
    let d2 = sq_dist_matrix(a, b);
    let s: f64 = d2.iter().map(|&v| kernel.eval_sq(v)).sum();
    s / (a.rows() * b.rows()) as f64
}

/// Biased squared MMD without clamping.
pub fn mmd_squared_unclamped(a: &Tensor, b: &Tensor, kernel: &KernelSpec) -> Result<f64> {
    check_pair(a, b)?;
    // Evaluate in a canonical argument order so the result is exactly symmetric.
    let (a, b) = if canonical_le(a, b) { (a, b) } else { (b, a) };
    Ok(mean_kernel(a, a, kernel) + mean_kernel(b, b, kernel) - 2.0 * mean_kernel(a, b, kernel))
}

/// Biased squared MMD between the rows of `a` (m x d) and `b` (n x d), clamped at zero.
pub fn mmd_squared_biased(a: &Tensor, b: &Tensor, kernel: &KernelSpec) -> Result<f64> {
    Ok(mmd_squared_unclamped(a, b, kernel)?.max(0.0))
}

/// Square root of the clamped estimate.
pub fn mmd(a: &Tensor, b: &Tensor, kernel: &KernelSpec) -> Result<f64> {
    Ok(mmd_squared_biased(a, b, kernel)?.sqrt())
}

/// Gradients of the unclamped estimate with respect to every row of `a` and `b`.
pub(crate) fn mmd_squared_grad(a: &Tensor, b: &Tensor, kernel: &KernelSpec) -> (Tensor, Tensor) {
    let (m, n) = (a.rows() as f64, b.rows() as f64);
    let ga = self_cross_grad(a, a, kernel, 2.0 / (m * m), b, -2.0 / (m * n));
    let gb = self_cross_grad(b, b, kernel, 2.0 / (n * n), a, -2.0 / (m * n));
    (ga, gb)
}

/// d/dx_i of `cs Σ_j κ(x_i, s_j) + cc Σ_j κ(x_i, c_j)` with κ's dependence on
/// x through the squared distance. Self-pairs appear twice in the double sum,
/// hence the factor 2 already folded into `cs` by the caller.
fn self_cross_grad(
    x: &Tensor,
    s: &Tensor,
    kernel: &KernelSpec,
    cs: f64,
    c: &Tensor,
    cc: f64,
) -> Tensor {
    let d = x.cols();
    let mut g = Tensor::zeros(x.shape());
    let ds = sq_dist_matrix(x, s);
    let dc = sq_dist_matrix(x, c);
    for i in 0..x.rows() {
        let xi = x.row(i).to_vec();
        let gi = g.row_mut(i);
        for (j, &d2) in ds[i * s.rows()..(i + 1) * s.rows()].iter().enumerate() {
            let w = cs * 2.0 * kernel.deriv_sq(d2);
            let sj = s.row(j);
            for k in 0..d {
                gi[k] += w * (xi[k] - sj[k]);
            }
        }
        for (j, &d2) in dc[i * c.rows()..(i + 1) * c.rows()].iter().enumerate() {
            let w = cc * 2.0 * kernel.deriv_sq(d2);
            let cj = c.row(j);
            for k in 0..d {
                gi[k] += w * (xi[k] - cj[k]);
            }
        }
    }
    g
}

/// Kernel Gram matrix of a fixed pool of points.
#[derive(Clone, Debug)]
pub struct GramPool {
    n: usize,
    gram: Vec<f64>,
}

impl GramPool {
    pub fn new(points: &Tensor, kernel: &KernelSpec) -> Self {
        let n = points.rows();
        let mut gram = sq_dist_matrix(points, points);
        gram.iter_mut().for_each(|v| *v = kernel.eval_sq(*v));
        Self { n, gram }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// `wᵀ K w` over the non-zero entries of `w`.
    pub fn quadratic_form(&self, w: &[f64]) -> f64 {
        let nz: Vec<usize> = (0..self.n).filter(|&i| w[i] != 0.0).collect();
        let mut total = 0.0;
        for &i in &nz {
            let row = &self.gram[i * self.n..(i + 1) * self.n];
            let s: f64 = nz.iter().map(|&j| row[j] * w[j]).sum();
            total += w[i] * s;
        }
        total
    }

    /// Squared MMD between two index multisets drawn from the pool.
    pub fn mmd_squared_indices(&self, a: &[usize], b: &[usize]) -> f64 {
        let mut w = vec![0.0; self.n];
        let (ia, ib) = (1.0 / a.len() as f64, 1.0 / b.len() as f64);
        a.iter().for_each(|&i| w[i] += ia);
        b.iter().for_each(|&i| w[i] -= ib);
        self.quadratic_form(&w).max(0.0)
    }
}

fn draw_indices(rng: &mut RngState, pool: std::ops::Range<usize>, k: usize) -> Vec<usize> {
    let len = pool.end - pool.start;
    (0..k).map(|_| pool.start + rng.below(len)).collect()
}

/// Minimum number of null replicates accepted by [`null_distribution`].
pub const MIN_REPLICATES: usize = 100;

/// Sampling distribution of the MMD (square root) under the model, sorted
/// ascending. Replicate `r` uses `rng.stream(r)`.
pub fn null_distribution(
    rng: &RngState,
    model_summaries: &Tensor,
    n_observed: usize,
    replicates: usize,
    kernel: &KernelSpec,
) -> Result<Vec<f64>> {
    let pool = GramPool::new(model_summaries, kernel);
    null_distribution_from_pool(rng, &pool, n_observed, replicates)
}

pub fn null_distribution_from_pool(
    rng: &RngState,
    pool: &GramPool,
    n_observed: usize,
    replicates: usize,
) -> Result<Vec<f64>> {
    let m = pool.len();
    if n_observed == 0 || m < n_observed {
        return Err(Error::InsufficientSamples(format!(
            "null distribution needs M >= n >= 1 (M = {m}, n = {n_observed})"
        )));
    }
    if replicates < MIN_REPLICATES {
        return Err(Error::InsufficientSamples(format!(
            "null distribution needs at least {MIN_REPLICATES} replicates, got {replicates}"
        )));
    }
    let mut out: Vec<f64> = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let mut local = rng.stream(r as u64);
            let a = draw_indices(&mut local, 0..m, m);
            let b = draw_indices(&mut local, 0..m, n_observed);
            pool.mmd_squared_indices(&a, &b).sqrt()
        })
        .collect();
    out.sort_by(f64::total_cmp);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MmdReport {
    pub mmd: f64,
    pub mmd_squared: f64,
    pub null_sample: Vec<f64>,
    pub critical_value: f64,
    pub alpha: f64,
    pub p_value: f64,
    pub reject: bool,
    pub n_observed: usize,
    pub n_model: usize,
}

impl MmdReport {
    pub fn verdict(&self) -> String {
        if self.reject {
            format!("misspecification detected at alpha={}", self.alpha)
        } else {
            format!("no misspecification detected at alpha={}", self.alpha)
        }
    }

    pub fn write_null_csv<W: std::io::Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "replicate,mmd")?;
        for (i, v) in self.null_sample.iter().enumerate() {
            writeln!(w, "{i},{v}")?;
        }
        Ok(())
    }
}

/// Critical value of a sorted null sample such that `mmd > critical` holds
/// exactly when the add-one p-value `(1 + #{null >= mmd}) / (1 + B)` is below
/// `alpha`.
pub fn critical_value(sorted_null: &[f64], alpha: f64) -> Result<f64> {
    let b = sorted_null.len();
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(invalid(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    // Largest count c of null values >= mmd with (1 + c) < alpha (1 + B).
    let bound = alpha * (1 + b) as f64 - 1.0;
    if bound <= 0.0 {
        return Err(Error::InsufficientSamples(format!(
            "{b} null replicates cannot resolve alpha = {alpha}"
        )));
    }
    let c_max = (bound.ceil() as usize).saturating_sub(1).min(b - 1);
    Ok(sorted_null[b - c_max - 1])
}

pub fn p_value(sorted_null: &[f64], stat: f64) -> f64 {
    let at_least = sorted_null.len() - sorted_null.partition_point(|&v| v < stat);
    (1 + at_least) as f64 / (1 + sorted_null.len()) as f64
}

/// Model summaries prepared for repeated testing: the Gram matrix and its
/// mean are computed once and shared by the null distribution and every
/// observed statistic.
#[derive(Clone, Debug)]
pub struct ModelReference {
    summaries: Tensor,
    kernel: KernelSpec,
    pool: GramPool,
    self_term: f64,
}

impl ModelReference {
    pub fn new(summaries: Tensor, kernel: KernelSpec) -> Result<Self> {
        kernel.validate()?;
        if summaries.rank() != 2 || summaries.rows() == 0 {
            return Err(Error::InsufficientSamples(format!(
                "model reference needs a non-empty matrix, got {:?}",
                summaries.shape()
            )));
        }
        let pool = GramPool::new(&summaries, &kernel);
        let m = summaries.rows() as f64;
        let self_term = pool.gram.iter().sum::<f64>() / (m * m);
        Ok(Self {
            summaries,
            kernel,
            pool,
            self_term,
        })
    }

    pub fn summaries(&self) -> &Tensor {
        &self.summaries
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn len(&self) -> usize {
        self.summaries.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Clamped squared MMD between `observed` and the reference set.
    pub fn mmd_squared(&self, observed: &Tensor) -> Result<f64> {
        check_pair(observed, &self.summaries)?;
        let v = mean_kernel(observed, observed, &self.kernel) + self.self_term
            - 2.0 * mean_kernel(observed, &self.summaries, &self.kernel);
        Ok(v.max(0.0))
    }

    pub fn mmd(&self, observed: &Tensor) -> Result<f64> {
        Ok(self.mmd_squared(observed)?.sqrt())
    }

    pub fn null_distribution(
        &self,
        rng: &RngState,
        n_observed: usize,
        replicates: usize,
    ) -> Result<Vec<f64>> {
        null_distribution_from_pool(rng, &self.pool, n_observed, replicates)
    }

    /// Test of `observed` against a precomputed sorted null for its size.
    pub fn report(&self, observed: &Tensor, alpha: f64, null: Vec<f64>) -> Result<MmdReport> {
        let crit = critical_value(&null, alpha)?;
        let mmd_squared = self.mmd_squared(observed)?;
        let mmd = mmd_squared.sqrt();
        Ok(MmdReport {
            mmd,
            mmd_squared,
            critical_value: crit,
            alpha,
            p_value: p_value(&null, mmd),
            reject: mmd > crit,
            n_observed: observed.rows(),
            n_model: self.len(),
            null_sample: null,
        })
    }

    pub fn test(
        &self,
        observed: &Tensor,
        alpha: f64,
        rng: &RngState,
        replicates: usize,
    ) -> Result<MmdReport> {
        check_pair(observed, &self.summaries)?;
        let null = self.null_distribution(rng, observed.rows(), replicates)?;
        self.report(observed, alpha, null)
    }
}

/// Frequentist test of the observed summaries against the model's summary pool.
pub fn hypothesis_test(
    observed: &Tensor,
    model_summaries: &Tensor,
    kernel: &KernelSpec,
    alpha: f64,
    rng: &RngState,
    replicates: usize,
) -> Result<MmdReport> {
    check_pair(observed, model_summaries)?;
    ModelReference::new(model_summaries.clone(), kernel.clone())?
        .test(observed, alpha, rng, replicates)
}

/// Fraction of MMD values from misspecified data exceeding the critical value.
pub fn power_estimate(alt_mmds: &[f64], critical_value: f64) -> Result<f64> {
    if alt_mmds.is_empty() {
        return Err(Error::InsufficientSamples("power of an empty list".into()));
    }
    Ok(alt_mmds.iter().filter(|&&v| v > critical_value).count() as f64 / alt_mmds.len() as f64)
}

/// Bootstrap MMDs: each replicate resamples `M` rows of the model set and
/// `n_b` rows of the observed set, both with replacement.
pub fn bootstrap_mmd(
    rng: &RngState,
    model_summaries: &Tensor,
    observed: &Tensor,
    n_b: usize,
    replicates: usize,
    kernel: &KernelSpec,
) -> Result<Vec<f64>> {
    check_pair(observed, model_summaries)?;
    if n_b == 0 || n_b > observed.rows() {
        return Err(invalid(format!(
            "bootstrap size n_b = {n_b} must be in 1..={}",
            observed.rows()
        )));
    }
    let (m, n) = (model_summaries.rows(), observed.rows());
    let union = Tensor::vstack(&[model_summaries.clone(), observed.clone()])?;
    let pool = GramPool::new(&union, kernel);
    Ok((0..replicates)
        .into_par_iter()
        .map(|r| {
            let mut local = rng.stream(r as u64);
            let a = draw_indices(&mut local, 0..m, m);
            let b = draw_indices(&mut local, m..m + n, n_b);
            pool.mmd_squared_indices(&a, &b).sqrt()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gauss1() -> KernelSpec {
        KernelSpec::gaussian(vec![1.0]).unwrap()
    }

    #[test]
    fn kernel_hand_values() {
        let k = gauss1();
        assert_eq!(k.eval(&[0.3, 0.1], &[0.3, 0.1]).unwrap(), 1.0);
        assert!((k.eval(&[0.0], &[1.0]).unwrap() - (-0.5f64).exp()).abs() < 1e-15);
        let imq = KernelSpec::imq(vec![1.0]).unwrap();
        assert!((imq.eval(&[0.0, 0.0], &[1.0, 0.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!(k.eval(&[0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn kernel_spec_validation() {
        assert!(KernelSpec::gaussian(vec![]).is_err());
        assert!(KernelSpec::imq(vec![1.0, -2.0]).is_err());
        let d = KernelSpec::default_for_dim(KernelFamily::GaussianSum, 8);
        assert_eq!(d.scales, vec![1.0, 2.0, 4.0, 8.0, 16.0]);
    }

    #[test]
    fn singleton_hand_value() {
        let a = Tensor::matrix(1, 1, vec![0.0]).unwrap();
        let b = Tensor::matrix(1, 1, vec![1.0]).unwrap();
        let v = mmd_squared_biased(&a, &b, &gauss1()).unwrap();
        assert!((v - (2.0 - 2.0 * (-0.5f64).exp())).abs() < 1e-12);
    }

    #[test]
    fn identical_samples_give_zero() {
        let mut rng = RngState::new(3);
        let a = Tensor::new(vec![20, 3], (0..60).map(|_| rng.normal()).collect()).unwrap();
        assert!(mmd_squared_biased(&a, &a, &gauss1()).unwrap().abs() < 1e-12);
    }

    #[test]
    fn empty_and_mismatched_inputs() {
        let a = Tensor::zeros(&[0, 2]);
        let b = Tensor::zeros(&[3, 2]);
        assert!(mmd_squared_biased(&a, &b, &gauss1()).is_err());
        assert!(mmd_squared_biased(&b, &Tensor::zeros(&[3, 1]), &gauss1()).is_err());
    }

    #[test]
    fn critical_value_matches_p_value_rule() {
        let null: Vec<f64> = (0..1000).map(|i| i as f64 / 1000.0).collect();
        for alpha in [0.01, 0.05, 0.1, 0.5] {
            let c = critical_value(&null, alpha).unwrap();
            for probe in null.iter().copied().chain([c - 1e-9, c + 1e-9, 2.0, -1.0]) {
                let p = p_value(&null, probe);
                assert_eq!(
                    probe > c,
                    p < alpha,
                    "alpha {alpha} probe {probe} crit {c} p {p}"
                );
            }
        }
        assert!(critical_value(&null[..10], 0.05).is_err());
    }

    #[test]
    fn null_replicate_of_identical_sets_is_zero() {
        let mut rng = RngState::new(1);
        let pts = Tensor::new(vec![50, 2], (0..100).map(|_| rng.normal()).collect()).unwrap();
        let pool = GramPool::new(&pts, &gauss1());
        let all: Vec<usize> = (0..50).collect();
        assert_eq!(pool.mmd_squared_indices(&all, &all), 0.0);
    }

    #[test]
    fn pool_quadratic_form_matches_direct_estimate() {
        let mut rng = RngState::new(2);
        let pts = Tensor::new(vec![30, 3], (0..90).map(|_| rng.normal()).collect()).unwrap();
        let k = KernelSpec::default_for_dim(KernelFamily::GaussianSum, 3);
        let pool = GramPool::new(&pts, &k);
        let a: Vec<usize> = (0..30).map(|_| rng.below(30)).collect();
        let b: Vec<usize> = (0..7).map(|_| rng.below(30)).collect();
        let direct = mmd_squared_biased(&pts.select_rows(&a), &pts.select_rows(&b), &k).unwrap();
        assert!((pool.mmd_squared_indices(&a, &b) - direct).abs() < 1e-10);
    }

    #[test]
    fn power_edges() {
        assert_eq!(power_estimate(&[0.1, 0.2], 0.5).unwrap(), 0.0);
        assert_eq!(power_estimate(&[0.6, 0.7], 0.5).unwrap(), 1.0);
        assert!(power_estimate(&[], 0.5).is_err());
    }

    #[test]
    fn bootstrap_size_checks() {
        let a = Tensor::zeros(&[10, 2]);
        let b = Tensor::zeros(&[3, 2]);
        let rng = RngState::new(0);
        assert!(bootstrap_mmd(&rng, &a, &b, 4, 10, &gauss1()).is_err());
        assert_eq!(
            bootstrap_mmd(&rng, &a, &b, 1, 10, &gauss1()).unwrap().len(),
            10
        );
        let one = bootstrap_mmd(&rng, &a, &b, 2, 1, &gauss1()).unwrap();
        assert_eq!(one, bootstrap_mmd(&rng, &a, &b, 2, 1, &gauss1()).unwrap());
    }
}
