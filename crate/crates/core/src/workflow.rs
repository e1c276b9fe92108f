//! End-to-end stages shared by the command-line tool and the test suites.
//! Every stage is a function of the experiment configuration and its seed.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::amortizer::Amortizer;
use crate::config::{streams, ExperimentConfig};
use crate::diagnose::{
    pca_param_correlation, posterior_rmse, recovery, sbc, PcaCorrelation, RecoveryReport,
    RmseReport, SbcResult,
};
use crate::error::{Error, Result};
use crate::mmd::{MmdReport, ModelReference};
use crate::rng::RngState;
use crate::scan::{misspec_scan, write_scan_csv, ScanRow};
use crate::simulators::{simulate_batch, stack_datasets, DataShape, ModelSpec};
use crate::tensor::Tensor;
use crate::train::{train_online, validation_summaries, TrainLog, TrainOutput};

pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_DIR: &str = "checkpoint";

pub fn root_rng(cfg: &ExperimentConfig) -> RngState {
    RngState::new(cfg.seed)
}

pub fn checkpoint_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join(CHECKPOINT_DIR)
}

pub fn write_resolved_config(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(CONFIG_FILE), cfg.to_json()?)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

/// Fresh networks for the configured model and summary width.
pub fn new_amortizer(cfg: &ExperimentConfig) -> Result<Amortizer> {
    let model = cfg.model.build()?;
    let mut rng = root_rng(cfg).stream(streams::INIT);
    Amortizer::new(
        model.as_ref(),
        cfg.summary.clone(),
        cfg.flow_config(),
        &mut rng,
    )
}

/// Trains from scratch, writing the checkpoint, logs and resolved config
/// under `out_dir`.
pub fn train_experiment(cfg: &ExperimentConfig) -> Result<(Amortizer, TrainLog)> {
    let model = cfg.model.build()?;
    let mut amortizer = new_amortizer(cfg)?;
    write_resolved_config(cfg, &cfg.out_dir)?;
    let out = TrainOutput {
        checkpoint_dir: Some(checkpoint_dir(cfg)),
    };
    let log = train_online(model.as_ref(), &mut amortizer, &cfg.train, &out)?;
    write_resolved_config(cfg, &checkpoint_dir(cfg))?;
    Ok((amortizer, log))
}

pub fn load_checkpoint(dir: &Path) -> Result<Amortizer> {
    Amortizer::load(dir)
}

/// Cache file of the reference summaries for a seed and size.
pub fn reference_file(seed: u64, m: usize) -> String {
    format!("reference_{seed:016x}_{m}.bin")
}

/// Summaries of `mmd.reference_size` training-model simulations, cached in
/// the checkpoint directory per seed.
pub fn reference_summaries(
    cfg: &ExperimentConfig,
    amortizer: &Amortizer,
    checkpoint: &Path,
) -> Result<Tensor> {
    let path = checkpoint.join(reference_file(cfg.seed, cfg.mmd.reference_size));
    if path.exists() {
        let t = Tensor::load(&path)?;
        if t.cols() == amortizer.summary_dim() {
            return Ok(t);
        }
    }
    let model = cfg.model.well_specified().build()?;
    let rng = root_rng(cfg).stream(streams::REFERENCE);
    let z = validation_summaries(amortizer, model.as_ref(), cfg.mmd.reference_size, &rng)?;
    z.save(&path)?;
    Ok(z)
}

pub fn model_reference(
    cfg: &ExperimentConfig,
    amortizer: &Amortizer,
    checkpoint: &Path,
) -> Result<ModelReference> {
    let z = reference_summaries(cfg, amortizer, checkpoint)?;
    ModelReference::new(z, cfg.mmd.kernel_for(amortizer.summary_dim()))
}

/// Side information written next to each simulated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSidecar {
    pub model: String,
    pub theta: Vec<f64>,
    pub param_names: Vec<String>,
    pub knobs: ModelSpec,
    pub seed: u64,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub model: String,
    pub n: usize,
    pub dataset_shape: Vec<usize>,
    pub files: Vec<String>,
    pub seed: u64,
}

pub fn dataset_file(j: usize) -> String {
    format!("dataset_{j:05}.bin")
}

/// Simulates `n` datasets from `spec` into `dir`, one binary tensor plus a
/// JSON sidecar each, and a manifest.
pub fn simulate_to_dir(
    cfg: &ExperimentConfig,
    spec: &ModelSpec,
    n: usize,
    dir: &Path,
) -> Result<Manifest> {
    std::fs::create_dir_all(dir)?;
    let model = spec.build()?;
    let (thetas, data) =
        simulate_batch(model.as_ref(), &root_rng(cfg).stream(streams::SIMULATE), n)?;
    let mut files = Vec::with_capacity(n);
    for (j, x) in crate::simulators::unstack(&data).iter().enumerate() {
        let name = dataset_file(j);
        x.save(dir.join(&name))?;
        write_json(
            &dir.join(name.replace(".bin", ".json")),
            &DatasetSidecar {
                model: model.name().to_string(),
                theta: thetas.row(j).to_vec(),
                param_names: model.param_names(),
                knobs: spec.clone(),
                seed: cfg.seed,
                index: j,
            },
        )?;
        files.push(name);
    }
    let manifest = Manifest {
        model: model.name().to_string(),
        n,
        dataset_shape: model.data_shape().dims(),
        files,
        seed: cfg.seed,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Reads observed data: a directory of dataset files, one dataset, or a
/// stacked batch. Returns a batch `[n, dims...]`.
pub fn read_observed(path: &Path, shape: DataShape) -> Result<Tensor> {
    let dims = shape.dims();
    if path.is_dir() {
        let mut names: Vec<PathBuf> = std::fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "bin"))
            .collect();
        names.sort();
        if names.is_empty() {
            return Err(Error::InsufficientSamples(format!(
                "no .bin datasets in {}",
                path.display()
            )));
        }
        let sets = names.iter().map(Tensor::load).collect::<Result<Vec<_>>>()?;
        for (p, t) in names.iter().zip(&sets) {
            if t.shape() != dims.as_slice() {
                return Err(incompatible(p, t.shape(), &dims));
            }
        }
        return stack_datasets(shape, &sets);
    }
    let t = Tensor::load(path)?;
    if t.shape() == dims.as_slice() {
        let mut s = vec![1];
        s.extend_from_slice(&dims);
        return t.reshape(&s);
    }
    if t.rank() == dims.len() + 1 && t.shape()[1..] == dims[..] && t.shape()[0] > 0 {
        return Ok(t);
    }
    Err(incompatible(path, t.shape(), &dims))
}

fn incompatible(path: &Path, got: &[usize], want: &[usize]) -> Error {
    Error::Format(format!(
        "{}: data of shape {got:?} is incompatible with the checkpoint's dataset shape {want:?}",
        path.display()
    ))
}

/// The hypothesis test for a batch of observed datasets.
pub fn diagnose_batch(
    cfg: &ExperimentConfig,
    amortizer: &Amortizer,
    reference: &ModelReference,
    observed: &Tensor,
) -> Result<MmdReport> {
    let z = amortizer.summarize(observed)?;
    let rng = root_rng(cfg).stream(streams::DIAGNOSE);
    reference.test(&z, cfg.mmd.alpha, &rng, cfg.mmd.replicates)
}

pub fn write_diagnose_outputs(report: &MmdReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_json(&dir.join("report.json"), report)?;
    let mut w = BufWriter::new(File::create(dir.join("null.csv"))?);
    report.write_null_csv(&mut w)
}

pub fn scan_experiment(
    cfg: &ExperimentConfig,
    amortizer: &Amortizer,
    reference: &ModelReference,
) -> Result<Vec<ScanRow>> {
    misspec_scan(
        amortizer,
        &cfg.model.well_specified(),
        reference,
        &cfg.scan_grid,
        &cfg.scan,
        &root_rng(cfg).stream(streams::SCAN),
    )
}

pub fn write_scan_outputs(rows: &[ScanRow], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_json(&dir.join("scan.json"), &rows)?;
    let mut w = BufWriter::new(File::create(dir.join("scan.csv"))?);
    write_scan_csv(rows, &mut w)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub sbc: SbcResult,
    pub recovery: RecoveryReport,
    pub rmse: Option<RmseReport>,
    pub pca: Option<PcaCorrelation>,
}

/// SBC, recovery, closed-form error where available and summary PCA, all on
/// the training model.
pub fn calibrate_experiment(
    cfg: &ExperimentConfig,
    amortizer: &Amortizer,
) -> Result<CalibrationReport> {
    let model = cfg.model.well_specified().build()?;
    let rng = root_rng(cfg).stream(streams::CALIBRATE);
    let c = &cfg.calibrate;
    let sbc = sbc(amortizer, model.as_ref(), c.n_sbc, c.draws, &rng.stream(0))?;
    let rec = recovery(amortizer, model.as_ref(), c.n_sbc, c.draws, &rng.stream(1))?;
    let (thetas, data) = simulate_batch(model.as_ref(), &rng.stream(2), c.rmse_datasets)?;
    let has_oracle = crate::simulators::unstack(&data)
        .first()
        .is_some_and(|x| model.analytic_posterior_mean(x).is_some());
    let rmse = if has_oracle {
        Some(posterior_rmse(
            amortizer,
            model.as_ref(),
            &data,
            c.rmse_draws,
            &rng.stream(3),
        )?)
    } else {
        None
    };
    let pca = if c.rmse_datasets > amortizer.summary_dim() {
        Some(pca_param_correlation(
            &amortizer.summarize(&data)?,
            &thetas,
        )?)
    } else {
        None
    };
    Ok(CalibrationReport {
        sbc,
        recovery: rec,
        rmse,
        pca,
    })
}

pub fn write_calibration_outputs(
    report: &CalibrationReport,
    names: &[String],
    dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_json(&dir.join("calibration.json"), report)?;
    let mut w = BufWriter::new(File::create(dir.join("sbc_histograms.csv"))?);
    report.sbc.write_histograms_csv(&mut w)?;
    let mut w = BufWriter::new(File::create(dir.join("recovery.csv"))?);
    report.recovery.write_csv(&mut w)?;
    if let Some(p) = &report.pca {
        let mut w = BufWriter::new(File::create(dir.join("pca_correlation.csv"))?);
        p.write_csv(&mut w, names)?;
    }
    Ok(())
}
