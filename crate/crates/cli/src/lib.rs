//! The `msbi` command line: train amortized posterior estimators with a structured summary
//! space and test observed data for model misspecification.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use msbi::config::{parse_assignment, ExperimentConfig, PRESETS};
use msbi::scan::GridAxis;
use msbi::workflow;

/// Exit status when a test flags misspecification or calibration fails.
const EXIT_FLAGGED: u8 = 2;

#[derive(Parser, Debug)]
#[command(
    name = "msbi",
    version,
    about = "Amortized inference with misspecification detection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long, value_name = "PATH", conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Start from a bundled configuration instead of a file.
    #[arg(long, value_name = "NAME")]
    preset: Option<String>,
    /// Override a configuration entry, e.g. `--set train.steps=500`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Experiment seed; all randomness derives from it.
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Significance level of the misspecification test.
    #[arg(long, value_name = "F")]
    alpha: Option<f64>,
    /// Worker threads (default: all cores).
    #[arg(long, value_name = "N")]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print a bundled configuration.
    Preset {
        #[arg(value_parser = clap::builder::PossibleValuesParser::new(PRESETS))]
        name: String,
    },
    /// Simulate datasets to `<out>/datasets`.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Number of datasets.
        #[arg(long, short)]
        n: usize,
        /// Simulator knob, e.g. `--knob mu0=3` (repeatable).
        #[arg(long = "knob", value_name = "KNOB=VALUE")]
        knobs: Vec<String>,
    },
    /// Train the summary and inference networks online.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Test observed data for misspecification (exit 2 when flagged).
    Diagnose {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory (default `<out>/checkpoint`).
        #[arg(long, value_name = "DIR")]
        checkpoint: Option<PathBuf>,
        /// Observed data: a dataset file, a stacked batch, or a directory of datasets.
        #[arg(long, value_name = "PATH", conflicts_with_all = ["knobs", "n"])]
        data: Option<PathBuf>,
        /// Simulate the observed data from the configured model with these knobs.
        #[arg(long = "knob", value_name = "KNOB=VALUE")]
        knobs: Vec<String>,
        /// Number of simulated observed datasets (default `scan.n_observed`).
        #[arg(long, short)]
        n: Option<usize>,
    },
    /// Detection rate and MMD over a grid of simulator knobs.
    Scan {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        checkpoint: Option<PathBuf>,
        /// Grid axis, e.g. `--grid tau=0.25,1,4` (repeatable; replaces `scan_grid`).
        #[arg(long = "grid", value_name = "KNOB=V1,V2,...")]
        grid: Vec<String>,
    },
    /// Simulation-based calibration and recovery (exit 2 if any KS p < 0.01).
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        n_sbc: Option<usize>,
        /// Posterior draws per dataset.
        #[arg(long)]
        draws: Option<usize>,
    },
}

const SBC_LEVEL: f64 = 0.01;

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let text = match (&c.config, &c.preset) {
        (Some(p), _) => {
            std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?
        }
        (None, Some(name)) => ExperimentConfig::preset(name)?.to_json()?,
        (None, None) => bail!("either --config or --preset is required"),
    };
    let mut ov = c
        .overrides
        .iter()
        .map(|s| parse_assignment(s))
        .collect::<msbi::Result<Vec<_>>>()?;
    if let Some(seed) = c.seed {
        ov.push(("seed".into(), seed.to_string()));
    }
    if let Some(out) = &c.out {
        ov.push(("out_dir".into(), serde_json::to_string(out)?));
    }
    if let Some(a) = c.alpha {
        ov.push(("mmd.alpha".into(), a.to_string()));
        ov.push(("scan.alpha".into(), a.to_string()));
    }
    if let Some(t) = c.threads {
        if t == 0 {
            bail!("--threads must be at least 1");
        }
        // Fails only if a pool already exists, in which case it is kept.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global();
    }
    Ok(ExperimentConfig::from_json(&text, &ov)?)
}

fn apply_knobs(cfg: &ExperimentConfig, knobs: &[String]) -> Result<msbi::simulators::ModelSpec> {
    let mut spec = cfg.model.clone();
    for k in knobs {
        let (name, value) = parse_assignment(k)?;
        let v: f64 = value
            .parse()
            .with_context(|| format!("knob {name}: {value:?} is not a number"))?;
        spec = spec.with_knob(&name, v)?;
    }
    Ok(spec)
}

fn checkpoint_or_default(cfg: &ExperimentConfig, cp: &Option<PathBuf>) -> PathBuf {
    cp.clone().unwrap_or_else(|| workflow::checkpoint_dir(cfg))
}

fn load(cp: &Path) -> Result<msbi::amortizer::Amortizer> {
    workflow::load_checkpoint(cp).with_context(|| format!("loading checkpoint {}", cp.display()))
}

fn parse_axis(s: &str) -> Result<GridAxis> {
    let (knob, values) = parse_assignment(s)?;
    let values = values
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .with_context(|| format!("grid {knob}: {v:?} is not a number"))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GridAxis { knob, values })
}

fn run(cli: Cli, out: &mut dyn Write) -> Result<u8> {
    match cli.command {
        Command::Preset { name } => {
            writeln!(out, "{}", ExperimentConfig::preset(&name)?.to_json()?)?;
            Ok(0)
        }
        Command::Simulate { common, n, knobs } => {
            let cfg = load_config(&common)?;
            let spec = apply_knobs(&cfg, &knobs)?;
            let dir = cfg.out_dir.join("datasets");
            workflow::write_resolved_config(&cfg, &cfg.out_dir)?;
            let m = workflow::simulate_to_dir(&cfg, &spec, n, &dir)?;
            writeln!(
                out,
                "wrote {} {} datasets of shape {:?} to {}",
                m.n,
                m.model,
                m.dataset_shape,
                dir.display()
            )?;
            Ok(0)
        }
        Command::Train { common } => {
            let cfg = load_config(&common)?;
            let (_, log) = workflow::train_experiment(&cfg)?;
            let last = log.steps.last();
            writeln!(
                out,
                "trained {} steps ({} rejected batches); final loss {}; checkpoint {}",
                log.steps.len(),
                log.rejected_batches,
                last.map_or(f64::NAN, |r| r.loss),
                workflow::checkpoint_dir(&cfg).display()
            )?;
            if let Some(v) = log.validation.last() {
                writeln!(
                    out,
                    "validation summary mmd {:.4}, round-trip error {:.2e}",
                    v.summary_mmd, v.roundtrip_error
                )?;
            }
            Ok(0)
        }
        Command::Diagnose {
            common,
            checkpoint,
            data,
            knobs,
            n,
        } => {
            let cfg = load_config(&common)?;
            let cp = checkpoint_or_default(&cfg, &checkpoint);
            let amortizer = load(&cp)?;
            let observed = match &data {
                Some(p) => workflow::read_observed(p, amortizer.data_shape)?,
                None => {
                    let spec = apply_knobs(&cfg, &knobs)?;
                    let model = spec.build()?;
                    let rng = workflow::root_rng(&cfg).stream(msbi::config::streams::SIMULATE);
                    msbi::simulators::simulate_batch(
                        model.as_ref(),
                        &rng,
                        n.unwrap_or(cfg.scan.n_observed),
                    )?
                    .1
                }
            };
            let reference = workflow::model_reference(&cfg, &amortizer, &cp)?;
            let report = workflow::diagnose_batch(&cfg, &amortizer, &reference, &observed)?;
            workflow::write_diagnose_outputs(&report, &cfg.out_dir.join("diagnose"))?;
            writeln!(
                out,
                "mmd {:.6}  critical value {:.6}  p-value {:.4}  (n = {}, M = {})",
                report.mmd,
                report.critical_value,
                report.p_value,
                report.n_observed,
                report.n_model
            )?;
            writeln!(out, "{}", report.verdict())?;
            Ok(if report.reject { EXIT_FLAGGED } else { 0 })
        }
        Command::Scan {
            common,
            checkpoint,
            grid,
        } => {
            let mut cfg = load_config(&common)?;
            if !grid.is_empty() {
                cfg.scan_grid = grid.iter().map(|g| parse_axis(g)).collect::<Result<_>>()?;
                cfg.validate()?;
            }
            if cfg.scan_grid.is_empty() {
                bail!("no grid: pass --grid KNOB=V1,V2,... or set scan_grid");
            }
            let cp = checkpoint_or_default(&cfg, &checkpoint);
            let amortizer = load(&cp)?;
            let reference = workflow::model_reference(&cfg, &amortizer, &cp)?;
            let rows = workflow::scan_experiment(&cfg, &amortizer, &reference)?;
            let dir = cfg.out_dir.join("scan");
            workflow::write_scan_outputs(&rows, &dir)?;
            for r in &rows {
                let knobs: Vec<String> = r.knobs.iter().map(|(k, v)| format!("{k}={v}")).collect();
                writeln!(
                    out,
                    "{:<24} mean mmd {:.4}  detection rate {:.3}",
                    knobs.join(" "),
                    r.mean_mmd,
                    r.detection_rate
                )?;
            }
            writeln!(out, "wrote {}", dir.join("scan.csv").display())?;
            Ok(0)
        }
        Command::Calibrate {
            common,
            checkpoint,
            n_sbc,
            draws,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(n) = n_sbc {
                cfg.calibrate.n_sbc = n;
            }
            if let Some(l) = draws {
                cfg.calibrate.draws = l;
            }
            cfg.validate()?;
            let cp = checkpoint_or_default(&cfg, &checkpoint);
            let amortizer = load(&cp)?;
            let report = workflow::calibrate_experiment(&cfg, &amortizer)?;
            workflow::write_calibration_outputs(
                &report,
                &amortizer.param_names,
                &cfg.out_dir.join("calibrate"),
            )?;
            for p in &report.sbc.params {
                writeln!(
                    out,
                    "sbc {:<10} ks {:.4}  p {:.4}",
                    p.name, p.ks_distance, p.ks_p_value
                )?;
            }
            for p in &report.recovery.params {
                writeln!(
                    out,
                    "recovery {:<10} rmse {:.4}  bias {:+.4}  r2 {:.3}",
                    p.name, p.rmse, p.bias, p.r2
                )?;
            }
            if let Some(r) = &report.rmse {
                writeln!(out, "posterior-mean rmse vs closed form {:.4}", r.rmse)?;
            }
            Ok(if report.sbc.passes(SBC_LEVEL) {
                0
            } else {
                EXIT_FLAGGED
            })
        }
    }
}

/// Parses `args` (program name first) and runs the command. Returns the exit
/// status: 0 ok, 1 error, 2 flagged; usage errors use clap's status.
pub fn run_from<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = if e.use_stderr() {
                write!(err, "{}", e.render())
            } else {
                write!(out, "{}", e.render())
            };
            return e.exit_code() as u8;
        }
    };
    match run(cli, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e:#}");
            1
        }
    }
}
