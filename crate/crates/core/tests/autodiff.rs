use msbi::autodiff::{grad_check, Bindings, Graph, ParamId, ParamStore, Var, LOG_CLAMP};
use msbi::mmd::{KernelFamily, KernelSpec};
use msbi::{Result, RngState, Tensor};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const POINTS: usize = 20;

fn randn(rng: &mut RngState, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
}

fn positive(rng: &mut RngState, shape: &[usize]) -> Tensor {
    randn(rng, shape).map(|v| 0.2 + v.abs())
}

/// Contracts `v` with fixed random weights so every output coordinate carries
/// a distinct adjoint.
fn weighted_sum(g: &mut Graph, v: Var, seed: u64) -> Result<Var> {
    let shape = g.value(v).shape().to_vec();
    let w = randn(&mut RngState::new(seed), &shape);
    let w = g.constant(w);
    let p = g.mul(v, w)?;
    Ok(g.sum(p))
}

/// Runs a central-difference check of `f` at `POINTS` random parameter values.
fn check_op<F>(name: &str, shapes: &[&[usize]], make: fn(&mut RngState, &[usize]) -> Tensor, f: F)
where
    F: Fn(&mut Graph, &Bindings) -> Result<Var>,
{
    let mut rng = RngState::new(0xad);
    for point in 0..POINTS {
        let mut store = ParamStore::new();
        for (i, s) in shapes.iter().enumerate() {
            store.add(format!("p{i}"), make(&mut rng, s)).unwrap();
        }
        let report = grad_check(&store, H, TOL, &f).unwrap();
        assert!(
            report.passed,
            "{name} adjoint failed at point {point}: {:?}",
            report.params
        );
    }
}

fn p(i: usize) -> ParamId {
    ParamId(i)
}

#[test]
fn matmul_adjoint() {
    check_op("matmul", &[&[3, 4], &[4, 2]], randn, |g, b| {
        let m = g.matmul(b[p(0)], b[p(1)])?;
        weighted_sum(g, m, 1)
    });
}

#[test]
fn broadcast_add_sub_mul_adjoints() {
    check_op("add_row", &[&[5, 3], &[3]], randn, |g, b| {
        let v = g.add(b[p(0)], b[p(1)])?;
        weighted_sum(g, v, 2)
    });
    check_op("sub_same", &[&[2, 3], &[2, 3]], randn, |g, b| {
        let v = g.sub(b[p(0)], b[p(1)])?;
        weighted_sum(g, v, 3)
    });
    check_op("mul_row", &[&[4, 2], &[2]], randn, |g, b| {
        let v = g.mul(b[p(0)], b[p(1)])?;
        weighted_sum(g, v, 4)
    });
    check_op("mul_scalar", &[&[4, 2], &[1]], randn, |g, b| {
        let v = g.mul(b[p(0)], b[p(1)])?;
        weighted_sum(g, v, 5)
    });
    check_op("sub_scalar", &[&[3], &[1]], randn, |g, b| {
        let v = g.sub(b[p(0)], b[p(1)])?;
        weighted_sum(g, v, 6)
    });
}

#[test]
fn unary_adjoints() {
    check_op("neg", &[&[6]], randn, |g, b| {
        let v = g.neg(b[p(0)]);
        weighted_sum(g, v, 7)
    });
    check_op("scale_add_scalar", &[&[6]], randn, |g, b| {
        let v = g.scale(b[p(0)], -1.7);
        let v = g.add_scalar(v, 0.3);
        weighted_sum(g, v, 8)
    });
    check_op("tanh", &[&[2, 3]], randn, |g, b| {
        let v = g.tanh(b[p(0)]);
        weighted_sum(g, v, 9)
    });
    check_op("exp", &[&[2, 3]], randn, |g, b| {
        let v = g.exp(b[p(0)]);
        weighted_sum(g, v, 10)
    });
    check_op("log", &[&[2, 3]], positive, |g, b| {
        let v = g.log(b[p(0)]);
        weighted_sum(g, v, 11)
    });
    check_op("softplus", &[&[2, 3]], randn, |g, b| {
        let v = g.softplus(b[p(0)]);
        weighted_sum(g, v, 12)
    });
    check_op("square", &[&[5]], randn, |g, b| {
        let v = g.square(b[p(0)]);
        weighted_sum(g, v, 13)
    });
}

#[test]
fn reduction_adjoints() {
    check_op("sum", &[&[3, 2]], randn, |g, b| {
        let v = g.exp(b[p(0)]);
        Ok(g.sum(v))
    });
    check_op("mean", &[&[3, 2]], randn, |g, b| {
        let v = g.tanh(b[p(0)]);
        Ok(g.mean(v))
    });
    for axis in 0..3 {
        check_op("sum_axis", &[&[2, 3, 4]], randn, move |g, b| {
            let v = g.sum_axis(b[p(0)], axis)?;
            weighted_sum(g, v, 14 + axis as u64)
        });
        check_op("mean_axis", &[&[2, 3, 4]], randn, move |g, b| {
            let v = g.mean_axis(b[p(0)], axis)?;
            weighted_sum(g, v, 20 + axis as u64)
        });
    }
}

#[test]
fn structural_adjoints() {
    check_op("concat_cols", &[&[3, 2], &[3, 1]], randn, |g, b| {
        let v = g.concat(&[b[p(0)], b[p(1)]], 1)?;
        weighted_sum(g, v, 30)
    });
    check_op("concat_rows", &[&[2, 2], &[1, 2]], randn, |g, b| {
        let v = g.concat(&[b[p(0)], b[p(1)]], 0)?;
        weighted_sum(g, v, 31)
    });
    check_op("slice", &[&[4, 5]], randn, |g, b| {
        let v = g.slice(b[p(0)], 1, 1, 4)?;
        weighted_sum(g, v, 32)
    });
    check_op("select_cols", &[&[3, 4]], randn, |g, b| {
        let v = g.select_cols(b[p(0)], &[3, 0, 0, 2])?;
        weighted_sum(g, v, 33)
    });
    check_op("reshape", &[&[2, 6]], randn, |g, b| {
        let v = g.reshape(b[p(0)], &[3, 4])?;
        let v = g.tanh(v);
        weighted_sum(g, v, 34)
    });
}

#[test]
fn mmd_adjoint_both_families() {
    for family in [KernelFamily::GaussianSum, KernelFamily::ImqSum] {
        let kernel = KernelSpec::default_for_dim(family, 3);
        check_op("mmd_squared", &[&[6, 3], &[4, 3]], randn, move |g, b| {
            Ok(g.mmd_squared(b[p(0)], b[p(1)], &kernel)?)
        });
    }
}

#[test]
fn forward_examples() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
    let eye = g.constant(Tensor::identity(3));
    let m = g.matmul(eye, a).unwrap();
    assert_eq!(g.value(m), g.value(a));

    let z = g.constant(Tensor::vector(vec![0.0, 0.0]));
    let e = g.exp(z);
    let s = g.sum(e);
    assert_eq!(g.value(s).item(), 2.0);

    let x = g.constant(Tensor::vector(vec![1.0]));
    let y = g.constant(Tensor::vector(vec![2.0, 3.0]));
    let c = g.concat(&[x, y], 0).unwrap();
    assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0]);
}

#[test]
fn shape_errors_name_the_op() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 2]));
    let err = g.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("matmul"), "{err}");
    let err = g.add(a, b).unwrap_err().to_string();
    assert!(err.contains("add"), "{err}");
    assert!(g.backward(a).is_err());
}

#[test]
fn sum_of_linear_map_has_outer_product_gradient() {
    // root = sum(W x) with W: 2x3 and x fixed, so dW[i][j] = x[j].
    let mut store = ParamStore::new();
    let w = store
        .add(
            "W",
            Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 0.1, 0.2, 0.3]).unwrap(),
        )
        .unwrap();
    let mut g = Graph::new();
    let b = store.bind(&mut g);
    let x = g.constant(Tensor::matrix(3, 1, vec![1.5, -2.0, 0.25]).unwrap());
    let wx = g.matmul(b[w], x).unwrap();
    let root = g.sum(wx);
    let grads = g.backward(root).unwrap();
    assert_eq!(
        grads.get(&g, b[w]).data(),
        &[1.5, -2.0, 0.25, 1.5, -2.0, 0.25]
    );
}

#[test]
fn constant_root_gives_zero_gradients() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::vector(vec![1.0, 2.0])).unwrap();
    let mut g = Graph::new();
    let b = store.bind(&mut g);
    let root = g.constant(Tensor::scalar(3.0));
    let grads = g.backward(root).unwrap();
    assert_eq!(grads.get(&g, b[w]).data(), &[0.0, 0.0]);
    assert_eq!(store.flat_grads(&g, &grads), vec![0.0, 0.0]);

    let report = grad_check(&store, H, TOL, |g, _| Ok(g.constant(Tensor::scalar(3.0)))).unwrap();
    assert!(report
        .params
        .iter()
        .all(|c| c.analytic == 0.0 && c.numeric.abs() < H));
}

#[test]
fn quadratic_grad_check_is_tight() {
    let mut store = ParamStore::new();
    store.add("p", Tensor::vector(vec![1.0, 2.0])).unwrap();
    let report = grad_check(&store, H, 1e-8, |g, b| {
        let sq = g.square(b[ParamId(0)]);
        Ok(g.sum(sq))
    })
    .unwrap();
    assert!(report.passed, "{report:?}");
    let worst = &report.params[0];
    assert!((worst.analytic - 2.0 * [1.0, 2.0][worst.index]).abs() < 1e-12);
}

#[test]
fn grad_check_rejects_non_finite_objective() {
    let mut store = ParamStore::new();
    store.add("p", Tensor::vector(vec![1000.0])).unwrap();
    let r = grad_check(&store, H, TOL, |g, b| {
        let e = g.exp(b[ParamId(0)]);
        Ok(g.sum(e))
    });
    assert!(r.is_err());
}

#[test]
fn log_clamp_has_zero_gradient_below_floor() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![0.0, 2.0]));
    let l = g.log(x);
    assert_eq!(g.value(l).data()[0], LOG_CLAMP.ln());
    let root = g.sum(l);
    let grads = g.backward(root).unwrap();
    assert_eq!(grads.get(&g, x).data(), &[0.0, 0.5]);
}

#[test]
fn gradient_accumulation_is_order_independent() {
    let mut rng = RngState::new(4);
    let mut store = ParamStore::new();
    let w = store.add("w", randn(&mut rng, &[3, 3])).unwrap();
    let xa = randn(&mut rng, &[3, 2]);
    let xb = randn(&mut rng, &[3, 4]);

    let branch = |g: &mut Graph, wv: Var, x: &Tensor| -> Var {
        let c = g.constant(x.clone());
        let m = g.matmul(wv, c).unwrap();
        let t = g.tanh(m);
        g.sum(t)
    };
    let run = |first_a: bool| -> Vec<f64> {
        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let (ra, rb) = if first_a {
            let ra = branch(&mut g, b[w], &xa);
            (ra, branch(&mut g, b[w], &xb))
        } else {
            let rb = branch(&mut g, b[w], &xb);
            (branch(&mut g, b[w], &xa), rb)
        };
        let root = g.add(ra, rb).unwrap();
        let grads = g.backward(root).unwrap();
        store.flat_grads(&g, &grads)
    };
    let (g1, g2) = (run(true), run(false));
    for (a, b) in g1.iter().zip(&g2) {
        assert!((a - b).abs() < 1e-12);
    }
}
