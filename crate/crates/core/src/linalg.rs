//! Small dense linear algebra: Cholesky, SPD inverse, PCA.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

const SYMMETRY_TOL: f64 = 1e-10;

fn square_dim(a: &Tensor, op: &'static str) -> Result<usize> {
    if a.rank() != 2 || a.shape()[0] != a.shape()[1] {
        return Err(Error::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: vec![],
        });
    }
    Ok(a.shape()[0])
}

/// Lower-triangular `L` with `A = L Lᵀ`.
pub fn cholesky(a: &Tensor) -> Result<Tensor> {
    let n = square_dim(a, "cholesky")?;
    let scale = a.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    for i in 0..n {
        for j in 0..i {
            if (a.get(i, j) - a.get(j, i)).abs() > SYMMETRY_TOL * scale {
                return Err(invalid(format!(
                    "cholesky: matrix not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    let mut l = Tensor::zeros(&[n, n]);
    for j in 0..n {
        let mut d = a.get(j, j);
        for k in 0..j {
            d -= l.get(j, k) * l.get(j, k);
        }
        if !(d > 0.0) {
            return Err(Error::NotPositiveDefinite { pivot: j, value: d });
        }
        let djj = d.sqrt();
        l.set(j, j, djj);
        for i in j + 1..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, s / djj);
        }
    }
    Ok(l)
}

/// Inverse of a symmetric positive definite matrix through its Cholesky factor.
pub fn spd_inverse(a: &Tensor) -> Result<Tensor> {
    let l = cholesky(a)?;
    let n = l.rows();
    // L^{-1} by forward substitution, column by column.
    let mut linv = Tensor::zeros(&[n, n]);
    for c in 0..n {
        for i in c..n {
            let mut s = if i == c { 1.0 } else { 0.0 };
            for k in c..i {
                s -= l.get(i, k) * linv.get(k, c);
            }
            linv.set(i, c, s / l.get(i, i));
        }
    }
    // A^{-1} = L^{-T} L^{-1}
    let mut out = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..=i {
            let mut s = 0.0;
            for k in i..n {
                s += linv.get(k, i) * linv.get(k, j);
            }
            out.set(i, j, s);
            out.set(j, i, s);
        }
    }
    Ok(out)
}

/// `L Lᵀ` for a square `L`.
pub fn outer_self(l: &Tensor) -> Tensor {
    let lt = l.transpose().expect("square matrix");
    l.matmul(&lt).expect("square matrix")
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PcaResult {
    /// `k x d` loadings, one principal axis per row.
    pub components: Tensor,
    pub explained_variance_ratio: Vec<f64>,
    pub explained_variance: Vec<f64>,
    pub means: Vec<f64>,
}

impl PcaResult {
    /// Scores of `data` (n x d) on the principal axes: `(data - means) Cᵀ`.
    pub fn transform(&self, data: &Tensor) -> Result<Tensor> {
        let d = self.means.len();
        if data.cols() != d {
            return Err(Error::Shape {
                op: "pca transform",
                lhs: data.shape().to_vec(),
                rhs: vec![d],
            });
        }
        let centered = center(data, &self.means);
        centered.matmul(&self.components.transpose()?)
    }

    pub fn inverse_transform(&self, scores: &Tensor) -> Result<Tensor> {
        let mut out = scores.matmul(&self.components)?;
        for i in 0..out.rows() {
            for (v, m) in out.row_mut(i).iter_mut().zip(&self.means) {
                *v += m;
            }
        }
        Ok(out)
    }

    pub fn cumulative_ratio(&self) -> Vec<f64> {
        self.explained_variance_ratio
            .iter()
            .scan(0.0, |acc, r| {
                *acc += r;
                Some(*acc)
            })
            .collect()
    }
}

fn center(data: &Tensor, means: &[f64]) -> Tensor {
    let mut out = data.clone();
    for i in 0..out.rows() {
        for (v, m) in out.row_mut(i).iter_mut().zip(means) {
            *v -= m;
        }
    }
    out
}

pub fn covariance(data: &Tensor) -> Result<(Vec<f64>, Tensor)> {
    let (n, d) = (data.rows(), data.cols());
    if n < 2 {
        return Err(Error::InsufficientSamples(format!(
            "covariance needs n >= 2, got {n}"
        )));
    }
    let means = data.column_means();
    let centered = center(data, &means);
    let mut cov = vec![0.0; d * d];
    crate::tensor::gemm(
        centered.data(),
        d,
        n,
        true,
        centered.data(),
        d,
        false,
        &mut cov,
        false,
    );
    cov.iter_mut().for_each(|v| *v /= (n - 1) as f64);
    Ok((means, Tensor::new(vec![d, d], cov)?))
}

/// Principal component analysis on the sample covariance of `data` (n x d).
pub fn pca(data: &Tensor, k: usize) -> Result<PcaResult> {
    let d = data.cols();
    if k > d || k == 0 {
        return Err(invalid(format!("pca: k = {k} must be in 1..={d}")));
    }
    let (means, cov) = covariance(data)?;
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(d, d, cov.data()));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let trace: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let mut components = Vec::with_capacity(k * d);
    let mut variance = Vec::with_capacity(k);
    for &idx in order.iter().take(k) {
        let col = eig.eigenvectors.column(idx);
        // Sign convention: largest-magnitude loading is positive.
        let pivot = col
            .iter()
            .copied()
            .fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        components.extend(col.iter().map(|v| sign * v));
        variance.push(eig.eigenvalues[idx].max(0.0));
    }
    let ratio = variance
        .iter()
        .map(|v| if trace > 0.0 { v / trace } else { 0.0 })
        .collect();
    Ok(PcaResult {
        components: Tensor::new(vec![k, d], components)?,
        explained_variance_ratio: ratio,
        explained_variance: variance,
        means,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;

    fn reconstruct(l: &Tensor) -> Tensor {
        outer_self(l)
    }

    #[test]
    fn cholesky_identity() {
        let l = cholesky(&Tensor::identity(2)).unwrap();
        assert_eq!(l, Tensor::identity(2));
    }

    #[test]
    fn cholesky_hand_example() {
        let a = Tensor::matrix(2, 2, vec![4., 2., 2., 5.]).unwrap();
        let l = cholesky(&a).unwrap();
        assert_eq!(l.data(), &[2., 0., 1., 2.]);
        // LLᵀ by direct multiplication
        assert_eq!(reconstruct(&l), a);
    }

    #[test]
    fn cholesky_indefinite_names_pivot() {
        let a = Tensor::matrix(2, 2, vec![1., 2., 2., 1.]).unwrap();
        match cholesky(&a) {
            Err(Error::NotPositiveDefinite { pivot, .. }) => assert_eq!(pivot, 1),
            other => panic!("expected pivot error, got {other:?}"),
        }
    }

    #[test]
    fn cholesky_random_pd_roundtrip() {
        let mut rng = RngState::new(11);
        for n in 1..8 {
            let b = Tensor::new(vec![n, n], (0..n * n).map(|_| rng.normal()).collect()).unwrap();
            let mut a = outer_self(&b);
            for i in 0..n {
                a.set(i, i, a.get(i, i) + 1e-3);
            }
            let l = cholesky(&a).unwrap();
            assert!(reconstruct(&l).max_abs_diff(&a) < 1e-9);
            let inv = spd_inverse(&a).unwrap();
            assert!(a.matmul(&inv).unwrap().max_abs_diff(&Tensor::identity(n)) < 1e-6);
        }
    }

    #[test]
    fn pca_rank_one() {
        let data = Tensor::from_rows(&[vec![1., 0.], vec![2., 0.], vec![4., 0.]]).unwrap();
        let p = pca(&data, 2).unwrap();
        assert!((p.explained_variance_ratio[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pca_isotropic_and_full_rank() {
        let mut rng = RngState::new(5);
        let n = 10_000;
        let data = Tensor::new(vec![n, 2], (0..2 * n).map(|_| rng.normal()).collect()).unwrap();
        let p = pca(&data, 2).unwrap();
        for r in &p.explained_variance_ratio {
            assert!((r - 0.5).abs() < 0.03, "{r}");
        }
        assert!((p.explained_variance_ratio.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        let ratios = &p.explained_variance_ratio;
        assert!(ratios[0] >= ratios[1]);
    }

    #[test]
    fn pca_roundtrip_and_orthonormal() {
        let mut rng = RngState::new(9);
        let (n, d) = (200, 4);
        let data = Tensor::new(
            vec![n, d],
            (0..n * d)
                .map(|i| rng.normal() * (1 + i % d) as f64)
                .collect(),
        )
        .unwrap();
        let p = pca(&data, d).unwrap();
        let back = p.inverse_transform(&p.transform(&data).unwrap()).unwrap();
        assert!(back.max_abs_diff(&data) < 1e-8);
        let gram = p
            .components
            .matmul(&p.components.transpose().unwrap())
            .unwrap();
        assert!(gram.max_abs_diff(&Tensor::identity(d)) < 1e-8);
    }

    #[test]
    fn pca_errors() {
        let data = Tensor::zeros(&[5, 2]);
        assert!(pca(&data, 3).is_err());
        assert!(pca(&Tensor::zeros(&[1, 2]), 1).is_err());
    }
}
