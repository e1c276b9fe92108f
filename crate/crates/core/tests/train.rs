use std::sync::atomic::{AtomicUsize, Ordering};

use msbi::amortizer::Amortizer;
use msbi::autodiff::Graph;
use msbi::flow::CouplingFlowConfig;
use msbi::simulators::{simulate_batch, DataShape, GenerativeModel, ModelSpec};
use msbi::summary::SummaryConfig;
use msbi::train::{augmented_loss, standard_normal, train_online, TrainConfig, TrainOutput};
use msbi::{Error, Result, RngState, Tensor};

fn gaussian() -> Box<dyn GenerativeModel> {
    let spec: ModelSpec = serde_json::from_str(r#"{"family":"gaussian2d"}"#).unwrap();
    spec.build().unwrap()
}

fn amortizer(model: &dyn GenerativeModel, seed: u64) -> Amortizer {
    Amortizer::new(
        model,
        SummaryConfig::deep_set(2, 2),
        CouplingFlowConfig::new(2, 2),
        &mut RngState::new(seed),
    )
    .unwrap()
}

fn small(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 8,
        validation_every: 0,
        pilot_size: 50,
        seed: 11,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_steps_leave_parameters_untouched() {
    let m = gaussian();
    let mut a = amortizer(m.as_ref(), 1);
    let before = a.store.flatten();
    let log = train_online(m.as_ref(), &mut a, &small(0), &TrainOutput::default()).unwrap();
    assert!(log.steps.is_empty());
    assert_eq!(a.store.flatten(), before);
}

#[test]
fn training_is_reproducible_bit_for_bit() {
    let m = gaussian();
    let run = || {
        let mut a = amortizer(m.as_ref(), 2);
        let log = train_online(m.as_ref(), &mut a, &small(15), &TrainOutput::default()).unwrap();
        (
            a.store.flatten(),
            log.steps.iter().map(|r| r.loss).collect::<Vec<_>>(),
        )
    };
    assert_eq!(run(), run());
}

fn loss_at(
    a: &Amortizer,
    thetas: &Tensor,
    data: &Tensor,
    reference: &Tensor,
    gamma: f64,
) -> (f64, f64, Vec<f64>) {
    let kernel = TrainConfig::default().kernel_for(a.summary_dim());
    let mut g = Graph::new();
    let p = a.store.bind(&mut g);
    let parts = augmented_loss(&mut g, &p, a, thetas, data, gamma, &kernel, reference).unwrap();
    let grads = g.backward(parts.loss).unwrap();
    (
        g.value(parts.loss).item(),
        g.value(parts.nll).item(),
        a.store.flat_grads(&g, &grads),
    )
}

#[test]
fn augmented_loss_gradient_matches_finite_differences() {
    let m = gaussian();
    let mut a = amortizer(m.as_ref(), 3);
    a.fit_pilot(m.as_ref(), &RngState::new(4), 200).unwrap();
    // Move off the zero-initialized coupling outputs so every path carries gradient.
    let mut rng = RngState::new(5);
    let flat: Vec<f64> = a
        .store
        .flatten()
        .iter()
        .map(|v| v + 0.1 * rng.normal())
        .collect();
    a.store.unflatten(&flat).unwrap();
    let (thetas, data) = simulate_batch(m.as_ref(), &RngState::new(6), 4).unwrap();
    let reference = standard_normal(&mut RngState::new(7), 4, 2);
    let (_, _, grads) = loss_at(&a, &thetas, &data, &reference, 1.0);

    let h = 1e-6;
    for k in (0..flat.len()).step_by((flat.len() / 40).max(1)) {
        let mut plus = flat.clone();
        plus[k] += h;
        a.store.unflatten(&plus).unwrap();
        let lp = loss_at(&a, &thetas, &data, &reference, 1.0).0;
        let mut minus = flat.clone();
        minus[k] -= h;
        a.store.unflatten(&minus).unwrap();
        let lm = loss_at(&a, &thetas, &data, &reference, 1.0).0;
        let fd = (lp - lm) / (2.0 * h);
        assert!(
            (fd - grads[k]).abs() <= 1e-6 + 1e-5 * fd.abs(),
            "param {k}: fd {fd} vs {}",
            grads[k]
        );
    }
}

#[test]
fn zero_gamma_reduces_to_negative_log_likelihood() {
    let m = gaussian();
    let mut a = amortizer(m.as_ref(), 8);
    a.fit_pilot(m.as_ref(), &RngState::new(9), 100).unwrap();
    let (thetas, data) = simulate_batch(m.as_ref(), &RngState::new(10), 16).unwrap();
    let reference = standard_normal(&mut RngState::new(11), 16, 2);
    let (loss, nll, _) = loss_at(&a, &thetas, &data, &reference, 0.0);
    assert_eq!(loss, nll);
    let (loss1, nll1, _) = loss_at(&a, &thetas, &data, &reference, 1.0);
    assert_eq!(nll1, nll);
    assert!(loss1 > nll);
}

#[test]
fn loss_decreases_over_a_short_run() {
    let m = gaussian();
    let mut a = amortizer(m.as_ref(), 12);
    let cfg = TrainConfig {
        batch_size: 32,
        learning_rate: 5e-3,
        ..small(600)
    };
    let log = train_online(m.as_ref(), &mut a, &cfg, &TrainOutput::default()).unwrap();
    let (early, late) = log.early_late_medians().unwrap();
    assert!(late < early, "early {early} late {late}");
}

/// Gaussian data for the pilot fit, NaN afterwards.
#[derive(Debug)]
struct Poisoned {
    inner: Box<dyn GenerativeModel>,
    good_calls: usize,
    calls: AtomicUsize,
}

impl GenerativeModel for Poisoned {
    fn name(&self) -> &'static str {
        "poisoned"
    }
    fn theta_dim(&self) -> usize {
        self.inner.theta_dim()
    }
    fn param_names(&self) -> Vec<String> {
        self.inner.param_names()
    }
    fn data_shape(&self) -> DataShape {
        self.inner.data_shape()
    }
    fn sample_prior(&self, rng: &mut RngState) -> Result<Vec<f64>> {
        self.inner.sample_prior(rng)
    }
    fn simulate(&self, rng: &mut RngState, theta: &[f64]) -> Result<Tensor> {
        let x = self.inner.simulate(rng, theta)?;
        if self.calls.fetch_add(1, Ordering::SeqCst) < self.good_calls {
            Ok(x)
        } else {
            Ok(x.map(|_| f64::NAN))
        }
    }
}

#[test]
fn persistent_non_finite_batches_abort_training() {
    let cfg = small(5);
    let m = Poisoned {
        inner: gaussian(),
        good_calls: cfg.pilot_size,
        calls: AtomicUsize::new(0),
    };
    let mut a = amortizer(&m, 13);
    match train_online(&m, &mut a, &cfg, &TrainOutput::default()) {
        Err(Error::TrainingAborted { step, .. }) => assert_eq!(step, 0),
        other => panic!("expected abort, got {other:?}"),
    }
    assert_eq!(
        m.calls.load(Ordering::SeqCst),
        cfg.pilot_size + cfg.max_retries * cfg.batch_size
    );
}

#[test]
fn checkpoints_round_trip_through_disk() {
    let m = gaussian();
    let mut a = amortizer(m.as_ref(), 14);
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        checkpoint_every: 5,
        validation_every: 5,
        validation_size: 50,
        ..small(10)
    };
    let log = train_online(
        m.as_ref(),
        &mut a,
        &cfg,
        &TrainOutput {
            checkpoint_dir: Some(dir.path().into()),
        },
    )
    .unwrap();
    assert_eq!(log.validation.len(), 2);
    assert!(dir.path().join("step_000005").is_dir());
    assert!(dir.path().join("train_log.csv").is_file());
    let b = Amortizer::load(dir.path()).unwrap();
    assert_eq!(b.store.flatten(), a.store.flatten());
    let x = simulate_batch(m.as_ref(), &RngState::new(15), 3).unwrap().1;
    assert_eq!(a.summarize(&x).unwrap(), b.summarize(&x).unwrap());
}
