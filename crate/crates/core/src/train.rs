//! The augmented objective and the online training loop.
//!
//! ```text
//! loss = mean_b[ −log q(θ_b | h(x_b)) ] + γ · MMD²( {h(x_b)}, {ε_b} ),   ε_b ~ N(0, I_S)
//! ```
//!
//! Every step simulates a fresh batch. Step `t` draws from the sub-stream
//! `(t, attempt)` of the configured seed, so runs are reproducible and a
//! rejected batch is replaced by a new, equally reproducible one.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::amortizer::Amortizer;
use crate::autodiff::{Bindings, Graph, Var};
use crate::error::{invalid, Error, Result};
use crate::mmd::{mmd, KernelFamily, KernelSpec};
use crate::rng::RngState;
use crate::simulators::{simulate_batch, GenerativeModel};
use crate::tensor::Tensor;

fn batch() -> usize {
    32
}
fn steps() -> usize {
    20_000
}
fn one() -> f64 {
    1.0
}
fn lr() -> f64 {
    1e-3
}
fn b1() -> f64 {
    0.9
}
fn b2() -> f64 {
    0.999
}
fn eps() -> f64 {
    1e-8
}
fn every() -> usize {
    1000
}
fn val_size() -> usize {
    500
}
fn pilot() -> usize {
    1000
}
fn retries() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "batch")]
    pub batch_size: usize,
    #[serde(default = "steps")]
    pub steps: usize,
    /// Weight of the summary-space MMD term; 0 gives plain posterior estimation.
    #[serde(default = "one")]
    pub gamma: f64,
    /// Peak step size.
    #[serde(default = "lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    #[serde(default = "b1")]
    pub beta1: f64,
    #[serde(default = "b2")]
    pub beta2: f64,
    #[serde(default = "eps")]
    pub epsilon: f64,
    /// Kernel of the MMD term; the default ladder for the summary width when absent.
    #[serde(default)]
    pub mmd_kernel: Option<KernelSpec>,
    #[serde(default)]
    pub seed: u64,
    /// Write a checkpoint every this many steps (0 = final only).
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Validation interval in steps (0 = never).
    #[serde(default = "every")]
    pub validation_every: usize,
    #[serde(default = "val_size")]
    pub validation_size: usize,
    /// Prior predictive draws used to fit input and parameter standardization.
    #[serde(default = "pilot")]
    pub pilot_size: usize,
    /// Consecutive non-finite batches tolerated before aborting.
    #[serde(default = "retries")]
    pub max_retries: usize,
}

/// Step size over the run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from the peak rate down to zero at the last step.
    #[default]
    Cosine,
}

impl LrSchedule {
    pub fn rate(self, peak: f64, step: usize, steps: usize) -> f64 {
        match self {
            LrSchedule::Constant => peak,
            LrSchedule::Cosine => {
                0.5 * peak
                    * (1.0 + (std::f64::consts::PI * step as f64 / steps.max(1) as f64).cos())
            }
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be at least 1"));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(invalid(format!(
                "gamma must be non-negative, got {}",
                self.gamma
            )));
        }
        if !(self.learning_rate > 0.0)
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.epsilon > 0.0)
        {
            return Err(invalid("invalid Adam hyperparameters"));
        }
        if self.pilot_size < 2 {
            return Err(invalid("pilot_size must be at least 2"));
        }
        if let Some(k) = &self.mmd_kernel {
            k.validate()?;
        }
        Ok(())
    }

    pub fn kernel_for(&self, summary_dim: usize) -> KernelSpec {
        self.mmd_kernel
            .clone()
            .unwrap_or_else(|| KernelSpec::default_for_dim(KernelFamily::GaussianSum, summary_dim))
    }
}

/// First and second moment estimates of Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(Error::Shape {
            op: "adam_step",
            lhs: vec![params.len()],
            rhs: vec![grads.len(), state.m.len()],
        });
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient entry {i}")));
    }
    state.t += 1;
    let c1 = 1.0 - beta1.powi(state.t as i32);
    let c2 = 1.0 - beta2.powi(state.t as i32);
    for i in 0..params.len() {
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * grads[i];
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * grads[i] * grads[i];
        let mh = state.m[i] / c1;
        let vh = state.v[i] / c2;
        params[i] -= lr * mh / (vh.sqrt() + eps);
    }
    Ok(())
}

/// Nodes of the augmented objective.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub loss: Var,
    pub nll: Var,
    pub mmd: Option<Var>,
    pub summaries: Var,
}

/// Records the augmented loss on `g`. `reference` holds the `N(0, I)` draws
/// the summaries are compared with; it enters as a constant.
pub fn augmented_loss(
    g: &mut Graph,
    p: &Bindings,
    amortizer: &Amortizer,
    thetas: &Tensor,
    batch: &Tensor,
    gamma: f64,
    kernel: &KernelSpec,
    reference: &Tensor,
) -> Result<LossParts> {
    let (lp, z) = amortizer.log_prob_graph(g, p, thetas, batch)?;
    if let Some(index) = g.value(lp).data().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteLoss { index });
    }
    let mean_lp = g.mean(lp);
    let nll = g.neg(mean_lp);
    let (loss, mmd) = if gamma > 0.0 {
        let r = g.input(reference.clone());
        let m = g.mmd_squared(z, r, kernel)?;
        let w = g.scale(m, gamma);
        (g.add(nll, w)?, Some(m))
    } else {
        (nll, None)
    };
    if !g.value(loss).item().is_finite() {
        return Err(Error::NonFiniteLoss { index: 0 });
    }
    Ok(LossParts {
        loss,
        nll,
        mmd,
        summaries: z,
    })
}

pub fn standard_normal(rng: &mut RngState, rows: usize, cols: usize) -> Tensor {
    Tensor::new(
        vec![rows, cols],
        (0..rows * cols).map(|_| rng.normal()).collect(),
    )
    .expect("consistent shape")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub nll: f64,
    pub mmd_term: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub step: usize,
    /// MMD between validation summaries and as many `N(0, I)` draws.
    pub summary_mmd: f64,
    /// Largest flow round-trip error on the validation pairs.
    pub roundtrip_error: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub validation: Vec<ValidationRecord>,
    pub rejected_batches: usize,
}

impl TrainLog {
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "step,loss,nll,mmd_term,grad_norm")?;
        for r in &self.steps {
            writeln!(
                w,
                "{},{},{},{},{}",
                r.step, r.loss, r.nll, r.mmd_term, r.grad_norm
            )?;
        }
        Ok(())
    }

    pub fn write_validation_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "step,summary_mmd,roundtrip_error")?;
        for r in &self.validation {
            writeln!(w, "{},{},{}", r.step, r.summary_mmd, r.roundtrip_error)?;
        }
        Ok(())
    }

    fn median_loss(&self, from: usize, to: usize) -> Option<f64> {
        let mut v: Vec<f64> = self
            .steps
            .iter()
            .filter(|r| r.step >= from && r.step < to)
            .map(|r| r.loss)
            .collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        Some(v[v.len() / 2])
    }

    /// Median loss over the first and last tenth of the run.
    pub fn early_late_medians(&self) -> Option<(f64, f64)> {
        let k = self.steps.len();
        let tenth = (k / 10).max(1);
        Some((self.median_loss(0, tenth)?, self.median_loss(k - tenth, k)?))
    }
}

/// Where and how often [`train_online`] writes checkpoints.
#[derive(Clone, Debug, Default)]
pub struct TrainOutput {
    pub checkpoint_dir: Option<PathBuf>,
}

const PILOT_STREAM: u64 = 0;
const STEP_STREAM: u64 = 1;
const VALIDATION_STREAM: u64 = 2;

/// Validation summaries: `m` fresh simulations from `model` passed through the
/// summary network. Dataset `j` uses `rng.stream(j)`.
pub fn validation_summaries(
    amortizer: &Amortizer,
    model: &dyn GenerativeModel,
    m: usize,
    rng: &RngState,
) -> Result<Tensor> {
    let (_, data) = simulate_batch(model, rng, m)?;
    amortizer.summarize(&data)
}

fn validate_step(
    amortizer: &Amortizer,
    model: &dyn GenerativeModel,
    cfg: &TrainConfig,
    root: &RngState,
    step: usize,
) -> Result<ValidationRecord> {
    let rng = root.stream(VALIDATION_STREAM);
    let (thetas, data) = simulate_batch(model, &rng.stream(0), cfg.validation_size)?;
    let z = amortizer.summarize(&data)?;
    let s = amortizer.summary_dim();
    let reference = standard_normal(&mut rng.stream(1), cfg.validation_size, s);
    let summary_mmd = mmd(&z, &reference, &cfg.kernel_for(s))?;
    let t = amortizer.transform.to_flow(&thetas)?;
    let (u, _) = amortizer.flow.forward_values(&amortizer.store, &t, &z)?;
    let back = amortizer.flow.inverse(&amortizer.store, &u, &z)?;
    Ok(ValidationRecord {
        step,
        summary_mmd,
        roundtrip_error: back.max_abs_diff(&t),
    })
}

/// Fits the pilot transforms and runs `cfg.steps` online updates.
pub fn train_online(
    model: &dyn GenerativeModel,
    amortizer: &mut Amortizer,
    cfg: &TrainConfig,
    out: &TrainOutput,
) -> Result<TrainLog> {
    cfg.validate()?;
    let root = RngState::new(cfg.seed);
    amortizer.fit_pilot(model, &root.stream(PILOT_STREAM), cfg.pilot_size)?;
    let kernel = cfg.kernel_for(amortizer.summary_dim());
    let steps_rng = root.stream(STEP_STREAM);
    let mut adam = AdamState::new(amortizer.store.num_scalars());
    let mut log = TrainLog::default();
    let s = amortizer.summary_dim();

    for step in 0..cfg.steps {
        let mut attempt = 0usize;
        let (record, grads) = loop {
            let rng = steps_rng.stream2(step as u64, attempt as u64);
            let (thetas, data) = simulate_batch(model, &rng.stream(0), cfg.batch_size)?;
            let reference = standard_normal(&mut rng.stream(1), cfg.batch_size, s);
            match loss_and_grads(amortizer, &thetas, &data, cfg.gamma, &kernel, &reference) {
                Ok((rec, grads)) if grads.iter().all(|g| g.is_finite()) => {
                    break (StepRecord { step, ..rec }, grads)
                }
                Ok(_) | Err(Error::NonFiniteLoss { .. }) | Err(Error::NonFinite(_)) => {
                    log.rejected_batches += 1;
                    attempt += 1;
                    if attempt >= cfg.max_retries {
                        return Err(Error::TrainingAborted {
                            step,
                            reason: format!(
                                "{attempt} consecutive batches gave a non-finite loss or gradient"
                            ),
                        });
                    }
                }
                Err(e) => return Err(e),
            }
        };
        let mut flat = amortizer.store.flatten();
        let lr = cfg.lr_schedule.rate(cfg.learning_rate, step, cfg.steps);
        adam_step(
            &mut flat,
            &grads,
            &mut adam,
            lr,
            cfg.beta1,
            cfg.beta2,
            cfg.epsilon,
        )?;
        amortizer.store.unflatten(&flat)?;
        log.steps.push(record);

        let done = step + 1;
        if cfg.validation_every > 0 && done % cfg.validation_every == 0 {
            log.validation
                .push(validate_step(amortizer, model, cfg, &root, done)?);
        }
        if let Some(dir) = &out.checkpoint_dir {
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.steps {
                amortizer.save(&dir.join(format!("step_{done:06}")))?;
            }
        }
    }
    if let Some(dir) = &out.checkpoint_dir {
        amortizer.save(dir)?;
        write_log(dir, &log)?;
    }
    Ok(log)
}

fn write_log(dir: &Path, log: &TrainLog) -> Result<()> {
    let mut f = std::fs::File::create(dir.join("train_log.csv"))?;
    log.write_csv(&mut f)?;
    let mut f = std::fs::File::create(dir.join("validation_log.csv"))?;
    log.write_validation_csv(&mut f)
}

fn loss_and_grads(
    amortizer: &Amortizer,
    thetas: &Tensor,
    data: &Tensor,
    gamma: f64,
    kernel: &KernelSpec,
    reference: &Tensor,
) -> Result<(StepRecord, Vec<f64>)> {
    let mut g = Graph::new();
    let p = amortizer.store.bind(&mut g);
    let parts = augmented_loss(
        &mut g, &p, amortizer, thetas, data, gamma, kernel, reference,
    )?;
    let grads = g.backward(parts.loss)?;
    let flat = amortizer.store.flat_grads(&g, &grads);
    let grad_norm = flat.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok((
        StepRecord {
            step: 0,
            loss: g.value(parts.loss).item(),
            nll: g.value(parts.nll).item(),
            mmd_term: parts.mmd.map_or(0.0, |m| g.value(m).item()),
            grad_norm,
        },
        flat,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Textbook scalar Adam, one coordinate at a time.
    fn scalar_adam(p: &mut f64, m: &mut f64, v: &mut f64, t: i32, g: f64) {
        let (lr, b1, b2, eps) = (0.01, 0.9, 0.999, 1e-8);
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let mh = *m / (1.0 - f64::powi(b1, t));
        let vh = *v / (1.0 - f64::powi(b2, t));
        *p -= lr * mh / (vh.sqrt() + eps);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let s = LrSchedule::Cosine;
        assert_eq!(s.rate(0.1, 0, 100), 0.1);
        assert!((s.rate(0.1, 50, 100) - 0.05).abs() < 1e-15);
        assert!(s.rate(0.1, 100, 100).abs() < 1e-15);
        assert_eq!(LrSchedule::Constant.rate(0.1, 70, 100), 0.1);
    }

    #[test]
    fn adam_matches_scalar_reference_on_quadratic() {
        // f(p) = Σ c_i (p_i − a_i)², grad = 2 c_i (p_i − a_i).
        let c = [1.0, 3.0, 0.5];
        let a = [0.5, -1.0, 2.0];
        let mut p = vec![0.0; 3];
        let mut state = AdamState::new(3);
        let mut rp = [0.0; 3];
        let mut rm = [0.0; 3];
        let mut rv = [0.0; 3];
        for t in 1..=100 {
            let g: Vec<f64> = (0..3).map(|i| 2.0 * c[i] * (p[i] - a[i])).collect();
            adam_step(&mut p, &g, &mut state, 0.01, 0.9, 0.999, 1e-8).unwrap();
            for i in 0..3 {
                let gi = 2.0 * c[i] * (rp[i] - a[i]);
                scalar_adam(&mut rp[i], &mut rm[i], &mut rv[i], t, gi);
            }
        }
        for i in 0..3 {
            assert!((p[i] - rp[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_zero_grads_and_constant_grads() {
        let mut p = vec![1.0, -2.0];
        let mut s = AdamState::new(2);
        s.m = vec![0.5, 0.5];
        s.v = vec![0.2, 0.2];
        s.t = 3;
        let before = p.clone();
        adam_step(&mut p, &[0.0, 0.0], &mut s, 0.1, 0.9, 0.999, 1e-8).unwrap();
        assert!(s.m[0] < 0.5 && s.v[0] < 0.2);
        let mut fresh = AdamState::new(2);
        let mut q = before.clone();
        adam_step(&mut q, &[0.0, 0.0], &mut fresh, 0.1, 0.9, 0.999, 1e-8).unwrap();
        assert_eq!(q, before);

        let mut p = vec![0.0, 0.0];
        let mut s = AdamState::new(2);
        let mut last = vec![0.0; 2];
        for _ in 0..2000 {
            let prev = p.clone();
            adam_step(&mut p, &[3.0, -0.2], &mut s, 0.01, 0.9, 0.999, 1e-8).unwrap();
            last = vec![p[0] - prev[0], p[1] - prev[1]];
        }
        assert!((last[0] + 0.01).abs() < 1e-6 && (last[1] - 0.01).abs() < 1e-6);
        assert!(adam_step(&mut p, &[f64::NAN, 0.0], &mut s, 0.01, 0.9, 0.999, 1e-8).is_err());
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = TrainConfig::default();
        assert_eq!((c.batch_size, c.steps, c.gamma), (32, 20_000, 1.0));
        assert!(TrainConfig {
            gamma: -1.0,
            ..c.clone()
        }
        .validate()
        .is_err());
        assert!(serde_json::from_str::<TrainConfig>(r#"{"lr": 0.1}"#).is_err());
    }
}
