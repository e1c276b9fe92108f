//! Detection of misspecification over a grid of simulator knobs.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::amortizer::Amortizer;
use crate::diagnose::posterior_rmse;
use crate::error::{invalid, Result};
use crate::mmd::{critical_value, p_value, KernelSpec, ModelReference, MIN_REPLICATES};
use crate::rng::RngState;
use crate::simulators::{simulate_batch, GenerativeModel, ModelSpec};
use crate::train::validation_summaries;

fn n_obs() -> usize {
    100
}
fn reps() -> usize {
    20
}
fn alpha() -> f64 {
    0.05
}
fn b() -> usize {
    1000
}
fn draws() -> usize {
    100
}

/// Settings shared by every grid point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanConfig {
    /// Observed datasets per test.
    #[serde(default = "n_obs")]
    pub n_observed: usize,
    /// Independent tests per grid point.
    #[serde(default = "reps")]
    pub repetitions: usize,
    #[serde(default = "alpha")]
    pub alpha: f64,
    /// Null replicates.
    #[serde(default = "b")]
    pub replicates: usize,
    /// Posterior draws per dataset for the RMSE column.
    #[serde(default = "draws")]
    pub rmse_draws: usize,
}

impl Default for ScanConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl ScanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_observed == 0 || self.repetitions == 0 {
            return Err(invalid("n_observed and repetitions must be positive"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(invalid(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        if self.replicates < MIN_REPLICATES {
            return Err(invalid(format!(
                "at least {MIN_REPLICATES} null replicates are required"
            )));
        }
        Ok(())
    }
}

/// One knob and the values it takes; several axes form a Cartesian grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridAxis {
    pub knob: String,
    pub values: Vec<f64>,
}

pub fn grid_points(axes: &[GridAxis]) -> Vec<Vec<(String, f64)>> {
    let mut points = vec![Vec::new()];
    for axis in axes {
        let mut next = Vec::with_capacity(points.len() * axis.values.len());
        for p in &points {
            for &v in &axis.values {
                let mut q = p.clone();
                q.push((axis.knob.clone(), v));
                next.push(q);
            }
        }
        points = next;
    }
    points
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanRow {
    pub knobs: BTreeMap<String, f64>,
    pub mean_mmd: f64,
    pub sd_mmd: f64,
    pub detections: usize,
    pub repetitions: usize,
    pub detection_rate: f64,
    pub critical_value: f64,
    /// Posterior-mean error against the training model's closed form.
    pub rmse: Option<f64>,
    pub mmds: Vec<f64>,
}

/// The training model's summary distribution, built once per checkpoint.
pub fn build_reference(
    amortizer: &Amortizer,
    model: &dyn GenerativeModel,
    m: usize,
    kernel: KernelSpec,
    rng: &RngState,
) -> Result<ModelReference> {
    ModelReference::new(validation_summaries(amortizer, model, m, rng)?, kernel)
}

const NULL_STREAM: u64 = 0;
const POINT_STREAM: u64 = 1;

/// For every grid point, `repetitions` tests of `n_observed` fresh datasets
/// from the knob-modified model against `reference`.
pub fn misspec_scan(
    amortizer: &Amortizer,
    training: &ModelSpec,
    reference: &ModelReference,
    axes: &[GridAxis],
    cfg: &ScanConfig,
    rng: &RngState,
) -> Result<Vec<ScanRow>> {
    cfg.validate()?;
    let null =
        reference.null_distribution(&rng.stream(NULL_STREAM), cfg.n_observed, cfg.replicates)?;
    let crit = critical_value(&null, cfg.alpha)?;
    let train_model = training.build()?;
    let mut rows = Vec::new();
    for (gi, point) in grid_points(axes).into_iter().enumerate() {
        let mut spec = training.clone();
        for (k, v) in &point {
            spec = spec.with_knob(k, *v)?;
        }
        let model = spec.build()?;
        let prng = rng.stream(POINT_STREAM).stream(gi as u64);
        let mut mmds = Vec::with_capacity(cfg.repetitions);
        let mut detections = 0;
        let mut rmse = None;
        for rep in 0..cfg.repetitions {
            let rrng = prng.stream(rep as u64);
            let (_, data) = simulate_batch(model.as_ref(), &rrng.stream(0), cfg.n_observed)?;
            let z = amortizer.summarize(&data)?;
            let stat = reference.mmd(&z)?;
            if p_value(&null, stat) < cfg.alpha {
                detections += 1;
            }
            mmds.push(stat);
            if rep == 0
                && train_model
                    .analytic_posterior_mean(&crate::simulators::unstack(&data)[0])
                    .is_some()
            {
                rmse = Some(
                    posterior_rmse(
                        amortizer,
                        train_model.as_ref(),
                        &data,
                        cfg.rmse_draws,
                        &rrng.stream(1),
                    )?
                    .rmse,
                );
            }
        }
        let n = mmds.len() as f64;
        let mean = mmds.iter().sum::<f64>() / n;
        let sd = if mmds.len() > 1 {
            (mmds.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        rows.push(ScanRow {
            knobs: point.into_iter().collect(),
            mean_mmd: mean,
            sd_mmd: sd,
            detections,
            repetitions: cfg.repetitions,
            detection_rate: detections as f64 / n,
            critical_value: crit,
            rmse,
            mmds,
        });
    }
    Ok(rows)
}

pub fn write_scan_csv<W: Write>(rows: &[ScanRow], w: &mut W) -> Result<()> {
    let knobs: Vec<String> = rows
        .first()
        .map(|r| r.knobs.keys().cloned().collect())
        .unwrap_or_default();
    let mut header = knobs.clone();
    header.extend(
        [
            "mean_mmd",
            "sd_mmd",
            "detection_rate",
            "detections",
            "repetitions",
            "critical_value",
            "rmse",
        ]
        .map(String::from),
    );
    writeln!(w, "{}", header.join(","))?;
    for r in rows {
        let mut cells: Vec<String> = knobs
            .iter()
            .map(|k| r.knobs.get(k).map_or(String::new(), |v| v.to_string()))
            .collect();
        cells.push(r.mean_mmd.to_string());
        cells.push(r.sd_mmd.to_string());
        cells.push(r.detection_rate.to_string());
        cells.push(r.detections.to_string());
        cells.push(r.repetitions.to_string());
        cells.push(r.critical_value.to_string());
        cells.push(r.rmse.map_or(String::new(), |v| v.to_string()));
        writeln!(w, "{}", cells.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_is_cartesian_in_axis_order() {
        let g = grid_points(&[
            GridAxis {
                knob: "a".into(),
                values: vec![1.0, 2.0],
            },
            GridAxis {
                knob: "b".into(),
                values: vec![0.0, 5.0, 6.0],
            },
        ]);
        assert_eq!(g.len(), 6);
        assert_eq!(g[1], vec![("a".to_string(), 1.0), ("b".to_string(), 5.0)]);
        assert_eq!(grid_points(&[]), vec![Vec::<(String, f64)>::new()]);
    }
}
