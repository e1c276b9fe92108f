//! Posterior diagnostics: error against closed-form posteriors, rank-based
//! calibration, parameter recovery and summary-space PCA.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::amortizer::Amortizer;
use crate::dist::sample_mvn;
use crate::error::{invalid, Error, Result};
use crate::linalg::{cholesky, pca};
use crate::rng::RngState;
use crate::simulators::{simulate_batch, unstack, AnalyticPosterior, GenerativeModel};
use crate::tensor::Tensor;

/// Anything that draws from an approximate posterior for one dataset.
pub trait PosteriorSampler: Sync {
    /// `L` draws `[L, D]` given one dataset.
    fn sample(&self, x: &Tensor, l: usize, rng: &mut RngState) -> Result<Tensor>;

    /// Draws for every dataset of a batch; dataset `j` uses `rng.stream(j)`.
    fn sample_batch(&self, batch: &Tensor, l: usize, rng: &RngState) -> Result<Vec<Tensor>> {
        unstack(batch)
            .par_iter()
            .enumerate()
            .map(|(j, x)| self.sample(x, l, &mut rng.stream(j as u64)))
            .collect()
    }
}

impl PosteriorSampler for Amortizer {
    fn sample(&self, x: &Tensor, l: usize, rng: &mut RngState) -> Result<Tensor> {
        self.sample_posterior(x, l, rng)
    }

    fn sample_batch(&self, batch: &Tensor, l: usize, rng: &RngState) -> Result<Vec<Tensor>> {
        let z = self.summarize(batch)?;
        (0..z.rows())
            .into_par_iter()
            .map(|j| self.sample_given_summary(z.row(j), l, &mut rng.stream(j as u64)))
            .collect()
    }
}

/// Exact draws from a model's Gaussian conjugate posterior.
#[derive(Debug)]
pub struct OracleSampler<'a> {
    pub model: &'a dyn GenerativeModel,
}

impl PosteriorSampler for OracleSampler<'_> {
    fn sample(&self, x: &Tensor, l: usize, rng: &mut RngState) -> Result<Tensor> {
        match self.model.analytic_posterior(x) {
            Some(Ok(AnalyticPosterior::GaussianConjugate { mean, cov })) => {
                sample_mvn(rng, &mean, &cholesky(&cov)?, l)
            }
            Some(Ok(_)) => Err(invalid(format!(
                "{}: oracle draws need a Gaussian posterior",
                self.model.name()
            ))),
            Some(Err(e)) => Err(e),
            None => Err(missing_oracle(self.model)),
        }
    }
}

fn missing_oracle(model: &dyn GenerativeModel) -> Error {
    invalid(format!("{} has no closed-form posterior", model.name()))
}

fn column_means(draws: &Tensor) -> Vec<f64> {
    draws.column_means()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmseReport {
    /// Root mean square over datasets and compared parameters.
    pub rmse: f64,
    pub per_param: Vec<f64>,
    pub n_datasets: usize,
    pub draws: usize,
}

/// Error of the posterior mean estimated from `L` draws against the closed
/// form posterior mean, over the datasets of `batch`. Models whose closed
/// form covers only the leading parameters are compared on those.
pub fn posterior_rmse(
    sampler: &dyn PosteriorSampler,
    model: &dyn GenerativeModel,
    batch: &Tensor,
    l: usize,
    rng: &RngState,
) -> Result<RmseReport> {
    if l == 0 {
        return Err(invalid("posterior_rmse needs at least one draw"));
    }
    let datasets = unstack(batch);
    if datasets.is_empty() {
        return Err(Error::InsufficientSamples(
            "posterior_rmse on an empty batch".into(),
        ));
    }
    let truth: Vec<Vec<f64>> = datasets
        .iter()
        .map(|x| {
            model
                .analytic_posterior_mean(x)
                .unwrap_or_else(|| Err(missing_oracle(model)))
        })
        .collect::<Result<_>>()?;
    let draws = sampler.sample_batch(batch, l, rng)?;
    let p = truth[0].len();
    let mut sq = vec![0.0; p];
    for (t, d) in truth.iter().zip(&draws) {
        let m = column_means(d);
        for k in 0..p {
            sq[k] += (m[k] - t[k]).powi(2);
        }
    }
    let n = datasets.len() as f64;
    Ok(RmseReport {
        rmse: (sq.iter().sum::<f64>() / (n * p as f64)).sqrt(),
        per_param: sq.iter().map(|s| (s / n).sqrt()).collect(),
        n_datasets: datasets.len(),
        draws: l,
    })
}

/// Minimum number of posterior draws per dataset for rank statistics.
pub const MIN_SBC_DRAWS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SbcParam {
    pub name: String,
    /// `L + 1` bins.
    pub histogram: Vec<usize>,
    pub ks_distance: f64,
    pub ks_p_value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SbcResult {
    pub n_sbc: usize,
    pub draws: usize,
    pub params: Vec<SbcParam>,
    /// `ranks[j][d]` for dataset `j` and parameter `d`.
    pub ranks: Vec<Vec<usize>>,
}

impl SbcResult {
    pub fn min_p_value(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.ks_p_value)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn passes(&self, level: f64) -> bool {
        self.min_p_value() > level
    }

    pub fn write_histograms_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "param,bin,count")?;
        for p in &self.params {
            for (b, c) in p.histogram.iter().enumerate() {
                writeln!(w, "{},{b},{c}", p.name)?;
            }
        }
        Ok(())
    }
}

/// Simulation-based calibration. For each of `n_sbc` joint draws, the rank
/// of the true parameter among `L` posterior draws; ties are broken
/// uniformly at random. Uniformity of the ranks is judged per parameter with
/// a Kolmogorov–Smirnov test on the randomized fractional ranks.
pub fn sbc(
    sampler: &dyn PosteriorSampler,
    model: &dyn GenerativeModel,
    n_sbc: usize,
    l: usize,
    rng: &RngState,
) -> Result<SbcResult> {
    if l < MIN_SBC_DRAWS {
        return Err(invalid(format!(
            "sbc needs at least {MIN_SBC_DRAWS} draws, got {l}"
        )));
    }
    if n_sbc == 0 {
        return Err(Error::InsufficientSamples(
            "sbc needs at least one dataset".into(),
        ));
    }
    let (thetas, data) = simulate_batch(model, &rng.stream(0), n_sbc)?;
    let draws = sampler.sample_batch(&data, l, &rng.stream(1))?;
    let dim = thetas.cols();
    let mut tie_rng = rng.stream(2);
    let mut ranks = Vec::with_capacity(n_sbc);
    let mut fractional = vec![Vec::with_capacity(n_sbc); dim];
    for (j, d) in draws.iter().enumerate() {
        if d.rows() != l || d.cols() < dim {
            return Err(Error::Shape {
                op: "sbc draws",
                lhs: d.shape().to_vec(),
                rhs: vec![l, dim],
            });
        }
        let mut row = Vec::with_capacity(dim);
        for k in 0..dim {
            let t = thetas.get(j, k);
            let below = (0..l).filter(|&i| d.get(i, k) < t).count();
            let ties = (0..l).filter(|&i| d.get(i, k) == t).count();
            let r = below + if ties > 0 { tie_rng.below(ties + 1) } else { 0 };
            fractional[k].push((r as f64 + tie_rng.uniform()) / (l + 1) as f64);
            row.push(r);
        }
        ranks.push(row);
    }
    let names = model.param_names();
    let params = (0..dim)
        .map(|k| {
            let mut histogram = vec![0; l + 1];
            for r in &ranks {
                histogram[r[k]] += 1;
            }
            let dist = ks_uniform_distance(&mut fractional[k]);
            SbcParam {
                name: names.get(k).cloned().unwrap_or_else(|| format!("theta{k}")),
                histogram,
                ks_distance: dist,
                ks_p_value: kolmogorov_p_value(dist, n_sbc),
            }
        })
        .collect();
    Ok(SbcResult {
        n_sbc,
        draws: l,
        params,
        ranks,
    })
}

/// Largest gap between the empirical CDF of `u` and the Uniform(0, 1) CDF.
pub fn ks_uniform_distance(u: &mut [f64]) -> f64 {
    u.sort_by(f64::total_cmp);
    let n = u.len() as f64;
    u.iter()
        .enumerate()
        .map(|(i, &x)| {
            let x = x.clamp(0.0, 1.0);
            ((i + 1) as f64 / n - x).max(x - i as f64 / n)
        })
        .fold(0.0, f64::max)
}

/// Asymptotic Kolmogorov p-value with the usual small-sample correction
/// `λ = (√n + 0.12 + 0.11/√n) D`.
pub fn kolmogorov_p_value(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-18 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryParam {
    pub name: String,
    pub rmse: f64,
    pub bias: f64,
    pub r2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub n_datasets: usize,
    pub draws: usize,
    pub params: Vec<RecoveryParam>,
}

impl RecoveryReport {
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "param,rmse,bias,r2")?;
        for p in &self.params {
            writeln!(w, "{},{},{},{}", p.name, p.rmse, p.bias, p.r2)?;
        }
        Ok(())
    }
}

/// Posterior means from `L` draws against the generating parameters.
pub fn recovery_from_estimates(
    names: &[String],
    truth: &Tensor,
    estimates: &Tensor,
    draws: usize,
) -> Result<RecoveryReport> {
    if truth.shape() != estimates.shape() || truth.rank() != 2 {
        return Err(Error::Shape {
            op: "recovery",
            lhs: truth.shape().to_vec(),
            rhs: estimates.shape().to_vec(),
        });
    }
    let n = truth.rows();
    if n < 2 {
        return Err(Error::InsufficientSamples(
            "recovery needs at least two datasets".into(),
        ));
    }
    let means = truth.column_means();
    let params = (0..truth.cols())
        .map(|k| {
            let (mut sse, mut bias, mut sst) = (0.0, 0.0, 0.0);
            for j in 0..n {
                let e = estimates.get(j, k) - truth.get(j, k);
                sse += e * e;
                bias += e;
                sst += (truth.get(j, k) - means[k]).powi(2);
            }
            RecoveryParam {
                name: names.get(k).cloned().unwrap_or_else(|| format!("theta{k}")),
                rmse: (sse / n as f64).sqrt(),
                bias: bias / n as f64,
                r2: if sst > 0.0 {
                    1.0 - sse / sst
                } else {
                    f64::NEG_INFINITY
                },
            }
        })
        .collect();
    Ok(RecoveryReport {
        n_datasets: n,
        draws,
        params,
    })
}

/// Recovery statistics over `n` fresh joint draws.
pub fn recovery(
    sampler: &dyn PosteriorSampler,
    model: &dyn GenerativeModel,
    n: usize,
    l: usize,
    rng: &RngState,
) -> Result<RecoveryReport> {
    if l == 0 {
        return Err(invalid("recovery needs at least one draw"));
    }
    let (thetas, data) = simulate_batch(model, &rng.stream(0), n)?;
    let draws = sampler.sample_batch(&data, l, &rng.stream(1))?;
    let d = thetas.cols();
    let mut est = Vec::with_capacity(n * d);
    for dr in &draws {
        est.extend_from_slice(&column_means(dr)[..d]);
    }
    recovery_from_estimates(
        &model.param_names(),
        &thetas,
        &Tensor::new(vec![n, d], est)?,
        l,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaCorrelation {
    /// `D x k` Pearson correlations between parameters and component scores.
    pub correlations: Tensor,
    pub explained_variance_ratio: Vec<f64>,
    pub cumulative_ratio: Vec<f64>,
}

impl PcaCorrelation {
    pub fn write_csv<W: Write>(&self, w: &mut W, names: &[String]) -> Result<()> {
        let k = self.correlations.cols();
        let header: Vec<String> = (0..k).map(|c| format!("pc{}", c + 1)).collect();
        writeln!(w, "param,{}", header.join(","))?;
        for d in 0..self.correlations.rows() {
            let vals: Vec<String> = self
                .correlations
                .row(d)
                .iter()
                .map(|v| v.to_string())
                .collect();
            let name = names.get(d).cloned().unwrap_or_else(|| format!("theta{d}"));
            writeln!(w, "{name},{}", vals.join(","))?;
        }
        Ok(())
    }
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    (saa > 0.0 && sbb > 0.0).then(|| sab / (saa * sbb).sqrt())
}

/// Principal components of the summaries `[n, S]` and their correlation with
/// each parameter `[n, D]`.
pub fn pca_param_correlation(summaries: &Tensor, params: &Tensor) -> Result<PcaCorrelation> {
    let (n, s) = (summaries.rows(), summaries.cols());
    if params.rows() != n {
        return Err(Error::Shape {
            op: "pca_param_correlation",
            lhs: summaries.shape().to_vec(),
            rhs: params.shape().to_vec(),
        });
    }
    if n <= s {
        return Err(Error::InsufficientSamples(format!(
            "pca needs more rows ({n}) than summary dims ({s})"
        )));
    }
    let fit = pca(summaries, s)?;
    let scores = fit.transform(summaries)?.transpose()?;
    let cols = params.transpose()?;
    let k = (0..s)
        .take_while(|&c| fit.explained_variance[c] > 1e-12 * fit.explained_variance[0].max(1e-300))
        .count();
    if k == 0 {
        return Err(invalid("summaries have no variance"));
    }
    let mut corr = Vec::with_capacity(cols.rows() * k);
    for d in 0..cols.rows() {
        for c in 0..k {
            let r = pearson(cols.row(d), scores.row(c))
                .ok_or_else(|| invalid(format!("parameter {d} has no variance")))?;
            corr.push(r);
        }
    }
    Ok(PcaCorrelation {
        correlations: Tensor::new(vec![cols.rows(), k], corr)?,
        cumulative_ratio: fit.cumulative_ratio(),
        explained_variance_ratio: fit.explained_variance_ratio,
    })
}
