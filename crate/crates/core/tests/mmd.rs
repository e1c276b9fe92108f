use msbi::linalg::pca;
use msbi::mmd::{
    bootstrap_mmd, hypothesis_test, mmd, mmd_squared_biased, mmd_squared_unclamped,
    null_distribution, KernelFamily, KernelSpec, ModelReference,
};
use msbi::{RngState, Tensor};
use proptest::prelude::*;

fn randn(rng: &mut RngState, rows: usize, cols: usize, shift: f64) -> Tensor {
    Tensor::new(
        vec![rows, cols],
        (0..rows * cols).map(|_| rng.normal() + shift).collect(),
    )
    .unwrap()
}

/// Brute-force double loop over all pairs.
fn naive_mmd_squared(a: &Tensor, b: &Tensor, k: &KernelSpec) -> f64 {
    let mean = |x: &Tensor, y: &Tensor| {
        let mut s = 0.0;
        for i in 0..x.rows() {
            for j in 0..y.rows() {
                let d2: f64 = x
                    .row(i)
                    .iter()
                    .zip(y.row(j))
                    .map(|(p, q)| (p - q) * (p - q))
                    .sum();
                s += match k.family {
                    KernelFamily::GaussianSum => k
                        .scales
                        .iter()
                        .map(|s| (-d2 / (2.0 * s * s)).exp())
                        .sum::<f64>(),
                    KernelFamily::ImqSum => {
                        k.scales.iter().map(|s| s * s / (s * s + d2)).sum::<f64>()
                    }
                };
            }
        }
        s / (x.rows() * y.rows()) as f64
    };
    mean(a, a) + mean(b, b) - 2.0 * mean(a, b)
}

fn two_sample_ks(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

#[test]
fn vectorized_matches_naive_oracle() {
    let mut rng = RngState::new(11);
    for inst in 0..100 {
        let m = 1 + rng.below(20);
        let n = 1 + rng.below(20);
        let d = 1 + rng.below(8);
        let a = randn(&mut rng, m, d, 0.0);
        let b = randn(&mut rng, n, d, 0.5);
        for family in [KernelFamily::GaussianSum, KernelFamily::ImqSum] {
            let k = KernelSpec::default_for_dim(family, d);
            let fast = mmd_squared_unclamped(&a, &b, &k).unwrap();
            let slow = naive_mmd_squared(&a, &b, &k);
            assert!(
                (fast - slow).abs() < 1e-12,
                "instance {inst}: {fast} vs {slow}"
            );
        }
    }
}

#[test]
fn random_7_by_5_instance_matches_oracle() {
    let mut rng = RngState::new(75);
    let a = randn(&mut rng, 7, 3, 0.0);
    let b = randn(&mut rng, 5, 3, 0.0);
    let k = KernelSpec::gaussian(vec![1.0]).unwrap();
    assert!(
        (mmd_squared_biased(&a, &b, &k).unwrap() - naive_mmd_squared(&a, &b, &k).max(0.0)).abs()
            < 1e-12
    );
}

#[test]
fn gram_matrices_are_positive_semidefinite() {
    let mut rng = RngState::new(5);
    let pts = randn(&mut rng, 50, 3, 0.0);
    for family in [KernelFamily::GaussianSum, KernelFamily::ImqSum] {
        let k = KernelSpec::default_for_dim(family, 3);
        let mut gram = vec![0.0; 2500];
        for i in 0..50 {
            for j in 0..50 {
                gram[i * 50 + j] = k.eval(pts.row(i), pts.row(j)).unwrap();
            }
        }
        let m = nalgebra::DMatrix::from_row_slice(50, 50, &gram);
        let min = m.symmetric_eigen().eigenvalues.min();
        assert!(min > -1e-8, "{family:?} min eigenvalue {min}");
    }
}

#[test]
fn estimator_is_consistent() {
    let k = KernelSpec::gaussian(vec![1.0]).unwrap();
    let sizes = [50, 200, 800];
    let mut errs = [0.0; 3];
    for seed in 0..20 {
        let mut rng = RngState::new(1000 + seed);
        let reference = mmd(
            &randn(&mut rng, 3200, 2, 0.0),
            &randn(&mut rng, 3200, 2, 0.5),
            &k,
        )
        .unwrap();
        for (e, &n) in errs.iter_mut().zip(&sizes) {
            let v = mmd(&randn(&mut rng, n, 2, 0.0), &randn(&mut rng, n, 2, 0.5), &k).unwrap();
            *e += (v - reference).abs() / 20.0;
        }
    }
    assert!(errs[0] > errs[1] && errs[1] > errs[2], "{errs:?}");
}

#[test]
fn null_distribution_determinism_and_size_trend() {
    let mut rng = RngState::new(3);
    let model = randn(&mut rng, 1000, 2, 0.0);
    let k = KernelSpec::default_for_dim(KernelFamily::GaussianSum, 2);
    let base = RngState::new(99);
    let null = null_distribution(&base, &model, 100, 500, &k).unwrap();
    assert!(null.windows(2).all(|w| w[0] <= w[1]));
    let q95 = null[474];
    assert!(q95 > 0.0 && q95.is_finite());
    assert_eq!(
        null,
        null_distribution(&base, &model, 100, 500, &k).unwrap()
    );

    let median = |n| null_distribution(&base, &model, n, 500, &k).unwrap()[250];
    let (m1, m2, m5) = (median(1), median(2), median(5));
    assert!(m1 > m2 && m2 > m5, "{m1} {m2} {m5}");

    assert!(null_distribution(&base, &model, 100, 50, &k).is_err());
    assert!(null_distribution(&base, &model, 1001, 500, &k).is_err());
}

#[test]
fn type_one_error_is_calibrated() {
    let mut rng = RngState::new(21);
    let model = randn(&mut rng, 1000, 2, 0.0);
    let k = KernelSpec::default_for_dim(KernelFamily::GaussianSum, 2);
    let reference = ModelReference::new(model, k).unwrap();
    let null = reference
        .null_distribution(&RngState::new(1), 100, 1000)
        .unwrap();
    let mut rejections = 0;
    for _ in 0..200 {
        let obs = randn(&mut rng, 100, 2, 0.0);
        let r = reference.report(&obs, 0.05, null.clone()).unwrap();
        assert_eq!(r.reject, r.p_value < 0.05);
        rejections += r.reject as usize;
    }
    let rate = rejections as f64 / 200.0;
    assert!((0.02..=0.10).contains(&rate), "rate {rate}");
}

#[test]
fn gross_shift_and_singleton() {
    let mut rng = RngState::new(8);
    let model = randn(&mut rng, 1000, 2, 0.0);
    let k = KernelSpec::default_for_dim(KernelFamily::GaussianSum, 2);
    let shifted = randn(&mut rng, 100, 2, 3.0);
    let r = hypothesis_test(&shifted, &model, &k, 0.05, &RngState::new(2), 1000).unwrap();
    assert!(r.reject && r.p_value < 0.01);

    let single = randn(&mut rng, 1, 2, 0.0);
    let r = hypothesis_test(&single, &model, &k, 0.05, &RngState::new(2), 200).unwrap();
    assert!(r.mmd.is_finite() && (0.0..=1.0).contains(&r.p_value));
    let json = serde_json::to_string(&r).unwrap();
    assert!(json.contains("critical_value"));
}

#[test]
fn bootstrap_matches_null_when_observed_is_model() {
    let mut rng = RngState::new(31);
    let model = randn(&mut rng, 1000, 2, 0.0);
    let k = KernelSpec::default_for_dim(KernelFamily::GaussianSum, 2);
    let boot = bootstrap_mmd(&RngState::new(1), &model, &model, 5, 500, &k).unwrap();
    let null = null_distribution(&RngState::new(2), &model, 5, 500, &k).unwrap();
    let d = two_sample_ks(&boot, &null);
    assert!(d < 0.1, "KS distance {d}");
}

#[test]
fn pca_is_unaffected_by_mmd_imports() {
    // Keeps the linalg re-export path exercised from integration tests.
    let t = Tensor::matrix(3, 2, vec![1.0, 0.0, 2.0, 0.0, 4.0, 0.0]).unwrap();
    assert!((pca(&t, 1).unwrap().explained_variance_ratio[0] - 1.0).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn symmetric_and_nonnegative(seed in any::<u64>(), m in 1usize..12, n in 1usize..12, d in 1usize..5) {
        let mut rng = RngState::new(seed);
        let a = randn(&mut rng, m, d, 0.0);
        let b = randn(&mut rng, n, d, 0.3);
        for family in [KernelFamily::GaussianSum, KernelFamily::ImqSum] {
            let k = KernelSpec::default_for_dim(family, d);
            let ab = mmd_squared_biased(&a, &b, &k).unwrap();
            prop_assert_eq!(ab, mmd_squared_biased(&b, &a, &k).unwrap());
            prop_assert!(ab >= 0.0);
            prop_assert!(mmd_squared_unclamped(&a, &b, &k).unwrap() >= -1e-12);
        }
    }
}
