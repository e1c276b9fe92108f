//! Conditional normalizing flow built from affine coupling layers.
//!
//! Layer `l` permutes the coordinates with a fixed permutation, keeps the
//! first `D/2` of them (`x1`) and transforms the rest:
//!
//! ```text
//! [s_raw, t] = net_l([x1, z]),   s = c · tanh(s_raw / c)
//! y2 = x2 ⊙ exp(s) + t,          log_det += Σ s
//! ```
//!
//! For `D = 1` the kept half is empty and the subnet sees only `z`. Final
//! subnet layers start at zero, so a fresh flow is a pure permutation.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Bindings, Graph, ParamStore, Var};
use crate::error::{invalid, Error, Result};
use crate::nn::{Activation, Mlp, ParamSource};
use crate::rng::RngState;
use crate::tensor::Tensor;

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

fn default_layers() -> usize {
    6
}

fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}

fn default_clamp() -> f64 {
    1.9
}

fn default_perm_seed() -> u64 {
    0x5eed
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingFlowConfig {
    pub theta_dim: usize,
    pub cond_dim: usize,
    #[serde(default = "default_layers")]
    pub n_layers: usize,
    #[serde(default = "default_hidden")]
    pub subnet_hidden: Vec<usize>,
    #[serde(default = "default_perm_seed")]
    pub permutation_seed: u64,
    #[serde(default = "default_clamp")]
    pub scale_clamp: f64,
    #[serde(default)]
    pub activation: Activation,
}

impl CouplingFlowConfig {
    pub fn new(theta_dim: usize, cond_dim: usize) -> Self {
        Self {
            theta_dim,
            cond_dim,
            n_layers: default_layers(),
            subnet_hidden: default_hidden(),
            permutation_seed: default_perm_seed(),
            scale_clamp: default_clamp(),
            activation: Activation::Tanh,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.theta_dim == 0 || self.cond_dim == 0 || self.n_layers == 0 {
            return Err(invalid("flow needs theta_dim, cond_dim and n_layers >= 1"));
        }
        if !(self.scale_clamp > 0.0 && self.scale_clamp.is_finite()) {
            return Err(invalid(format!(
                "scale_clamp must be positive, got {}",
                self.scale_clamp
            )));
        }
        if self.subnet_hidden.contains(&0) {
            return Err(invalid("subnet widths must be positive"));
        }
        Ok(())
    }

    /// Per-layer coordinate permutations; never the identity when `D >= 2`.
    pub fn permutations(&self) -> Vec<Vec<usize>> {
        let base = RngState::new(self.permutation_seed);
        (0..self.n_layers)
            .map(|l| {
                let mut attempt = 0u64;
                loop {
                    let mut p: Vec<usize> = (0..self.theta_dim).collect();
                    base.stream2(l as u64, attempt).shuffle(&mut p);
                    if self.theta_dim < 2 || p.iter().enumerate().any(|(i, &v)| i != v) {
                        return p;
                    }
                    attempt += 1;
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
struct Coupling {
    perm: Vec<usize>,
    net: Mlp,
    keep: usize,
}

#[derive(Clone, Debug)]
pub struct CouplingFlow {
    pub config: CouplingFlowConfig,
    layers: Vec<Coupling>,
}

/// Output of [`CouplingFlow::forward`]: latent `[B, D]` and log-determinant `[B]`.
#[derive(Clone, Copy, Debug)]
pub struct FlowOutput {
    pub u: Var,
    pub log_det: Var,
}

impl CouplingFlow {
    pub fn new(config: CouplingFlowConfig, src: &mut ParamSource) -> Result<Self> {
        config.validate()?;
        let d = config.theta_dim;
        let keep = d / 2;
        let layers = config
            .permutations()
            .into_iter()
            .enumerate()
            .map(|(l, perm)| {
                let net = Mlp::new(
                    src,
                    &format!("flow.{l}"),
                    keep + config.cond_dim,
                    &config.subnet_hidden,
                    2 * (d - keep),
                    config.activation,
                    true,
                )?;
                Ok(Coupling { perm, net, keep })
            })
            .collect::<Result<_>>()?;
        Ok(Self { config, layers })
    }

    pub fn permutations(&self) -> Vec<Vec<usize>> {
        self.layers.iter().map(|l| l.perm.clone()).collect()
    }

    fn check(&self, g: &Graph, x: Var, z: Var) -> Result<()> {
        let (xs, zs) = (g.value(x).shape(), g.value(z).shape());
        let ok = xs.len() == 2
            && zs.len() == 2
            && xs[1] == self.config.theta_dim
            && zs[1] == self.config.cond_dim
            && xs[0] == zs[0];
        if !ok {
            return Err(Error::Shape {
                op: "flow",
                lhs: xs.to_vec(),
                rhs: zs.to_vec(),
            });
        }
        Ok(())
    }

    fn scale_shift(
        &self,
        layer: &Coupling,
        g: &mut Graph,
        p: &Bindings,
        x1: Option<Var>,
        z: Var,
    ) -> Result<(Var, Var)> {
        let input = match x1 {
            Some(x1) => g.concat(&[x1, z], 1)?,
            None => z,
        };
        let h = layer.net.forward(g, p, input)?;
        let d2 = self.config.theta_dim - layer.keep;
        let s_raw = g.slice(h, 1, 0, d2)?;
        let t = g.slice(h, 1, d2, 2 * d2)?;
        let c = self.config.scale_clamp;
        let s = g.scale(s_raw, 1.0 / c);
        let s = g.tanh(s);
        Ok((g.scale(s, c), t))
    }

    /// θ `[B, D]` → latent, conditioned on `z` `[B, S]`.
    pub fn forward(&self, g: &mut Graph, p: &Bindings, theta: Var, z: Var) -> Result<FlowOutput> {
        self.check(g, theta, z)?;
        let d = self.config.theta_dim;
        let mut x = theta;
        let mut log_det: Option<Var> = None;
        for (l, layer) in self.layers.iter().enumerate() {
            let xp = g.select_cols(x, &layer.perm)?;
            let x1 = (layer.keep > 0)
                .then(|| g.slice(xp, 1, 0, layer.keep))
                .transpose()?;
            let x2 = g.slice(xp, 1, layer.keep, d)?;
            let (s, t) = self.scale_shift(layer, g, p, x1, z)?;
            let es = g.exp(s);
            let y2 = g.mul(x2, es)?;
            let y2 = g.add(y2, t)?;
            x = match x1 {
                Some(x1) => g.concat(&[x1, y2], 1)?,
                None => y2,
            };
            if !g.value(x).is_finite() {
                return Err(Error::NonFinite(format!(
                    "flow layer {l} produced non-finite activations"
                )));
            }
            let ld = g.sum_axis(s, 1)?;
            log_det = Some(match log_det {
                Some(acc) => g.add(acc, ld)?,
                None => ld,
            });
        }
        Ok(FlowOutput {
            u: x,
            log_det: log_det.expect("at least one layer"),
        })
    }

    /// Per-row log density `[B]` of θ given `z` in flow coordinates.
    pub fn log_prob(&self, g: &mut Graph, p: &Bindings, theta: Var, z: Var) -> Result<Var> {
        let out = self.forward(g, p, theta, z)?;
        let sq = g.square(out.u);
        let ss = g.sum_axis(sq, 1)?;
        let base = g.scale(ss, -0.5);
        let base = g.add_scalar(base, -0.5 * self.config.theta_dim as f64 * LN_2PI);
        g.add(base, out.log_det)
    }

    /// Latent → θ, conditioned on `z`. Rows of `u` and `z` correspond.
    pub fn inverse(&self, store: &ParamStore, u: &Tensor, z: &Tensor) -> Result<Tensor> {
        Ok(self.inverse_with_log_det(store, u, z)?.0)
    }

    /// Inverse map and `log |det ∂θ/∂u|` per row.
    pub fn inverse_with_log_det(
        &self,
        store: &ParamStore,
        u: &Tensor,
        z: &Tensor,
    ) -> Result<(Tensor, Vec<f64>)> {
        let d = self.config.theta_dim;
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let uv = g.constant(u.clone());
        let zv = g.constant(z.clone());
        self.check(&g, uv, zv)?;
        let mut y = u.clone();
        let mut log_det = vec![0.0; u.rows()];
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let keep = layer.keep;
            let x1 = (keep > 0).then(|| {
                let v = g.constant(y.clone());
                g.slice(v, 1, 0, keep)
            });
            let x1 = x1.transpose()?;
            let (s, t) = self.scale_shift(layer, &mut g, &p, x1, zv)?;
            let (s, t) = (g.value(s).clone(), g.value(t).clone());
            let d2 = d - keep;
            let mut xp = y.clone();
            for i in 0..y.rows() {
                for j in 0..d2 {
                    let v = (y.get(i, keep + j) - t.get(i, j)) * (-s.get(i, j)).exp();
                    xp.set(i, keep + j, v);
                    log_det[i] -= s.get(i, j);
                }
            }
            // Undo the permutation: xp[:, j] = x[:, perm[j]].
            let mut x = Tensor::zeros(xp.shape());
            for i in 0..xp.rows() {
                for (j, &pj) in layer.perm.iter().enumerate() {
                    x.set(i, pj, xp.get(i, j));
                }
            }
            if !x.is_finite() {
                return Err(Error::NonFinite(format!(
                    "flow layer {l} inverse produced non-finite values"
                )));
            }
            y = x;
        }
        Ok((y, log_det))
    }

    /// Forward map without gradient bookkeeping: `(u, log_det)`.
    pub fn forward_values(
        &self,
        store: &ParamStore,
        theta: &Tensor,
        z: &Tensor,
    ) -> Result<(Tensor, Vec<f64>)> {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let t = g.constant(theta.clone());
        let zv = g.constant(z.clone());
        let out = self.forward(&mut g, &p, t, zv)?;
        Ok((g.value(out.u).clone(), g.value(out.log_det).data().to_vec()))
    }

    /// Log density of flow-space θ rows without gradient bookkeeping.
    pub fn log_prob_values(
        &self,
        store: &ParamStore,
        theta: &Tensor,
        z: &Tensor,
    ) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let t = g.constant(theta.clone());
        let zv = g.constant(z.clone());
        let lp = self.log_prob(&mut g, &p, t, zv)?;
        Ok(g.value(lp).data().to_vec())
    }

    /// `L` draws in flow coordinates for a single condition vector.
    pub fn sample(
        &self,
        store: &ParamStore,
        z: &[f64],
        l: usize,
        rng: &mut RngState,
    ) -> Result<Tensor> {
        if l == 0 {
            return Err(invalid("sample count must be at least 1"));
        }
        let d = self.config.theta_dim;
        let u = Tensor::new(vec![l, d], (0..l * d).map(|_| rng.normal()).collect())?;
        let zs = Tensor::new(
            vec![l, z.len()],
            z.iter().copied().cycle().take(l * z.len()).collect(),
        )?;
        self.inverse(store, &u, &zs)
    }
}

/// Elementwise map between model parameters and the flow's coordinates:
/// optional log for positive parameters, then standardization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamTransform {
    pub log: Vec<bool>,
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl ParamTransform {
    pub fn identity(dim: usize) -> Self {
        Self {
            log: vec![false; dim],
            shift: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    /// Fits shift and scale to pilot draws (rows of `thetas`).
    pub fn fit(thetas: &Tensor, log: Vec<bool>) -> Result<Self> {
        let d = thetas.cols();
        if log.len() != d || thetas.rows() < 2 {
            return Err(invalid(
                "parameter transform needs >= 2 draws of matching dimension",
            ));
        }
        let mut t = Self {
            log,
            ..Self::identity(d)
        };
        let g = t.to_flow(thetas)?;
        let means = g.column_means();
        for j in 0..d {
            let var = (0..g.rows())
                .map(|i| (g.get(i, j) - means[j]).powi(2))
                .sum::<f64>()
                / (g.rows() - 1) as f64;
            t.shift[j] = means[j];
            t.scale[j] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        }
        Ok(t)
    }

    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    pub fn to_flow(&self, thetas: &Tensor) -> Result<Tensor> {
        let mut out = thetas.clone();
        for row in out.data_mut().chunks_mut(self.dim()) {
            for j in 0..row.len() {
                let v = if self.log[j] {
                    if row[j] <= 0.0 {
                        return Err(invalid(format!(
                            "parameter {j} must be positive, got {}",
                            row[j]
                        )));
                    }
                    row[j].ln()
                } else {
                    row[j]
                };
                row[j] = (v - self.shift[j]) / self.scale[j];
            }
        }
        Ok(out)
    }

    pub fn from_flow(&self, flow: &Tensor) -> Tensor {
        let mut out = flow.clone();
        for row in out.data_mut().chunks_mut(self.dim()) {
            for j in 0..row.len() {
                let v = row[j] * self.scale[j] + self.shift[j];
                row[j] = if self.log[j] { v.exp() } else { v };
            }
        }
        out
    }

    /// `log |d flow / d θ|` for one parameter vector.
    pub fn log_abs_det(&self, theta: &[f64]) -> f64 {
        (0..self.dim())
            .map(|j| -self.scale[j].ln() - if self.log[j] { theta[j].ln() } else { 0.0 })
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permutations_are_fixed_and_non_identity() {
        let cfg = CouplingFlowConfig::new(2, 3);
        let ps = cfg.permutations();
        assert_eq!(ps, cfg.permutations());
        assert!(ps.iter().all(|p| p == &vec![1, 0]));
        let one = CouplingFlowConfig::new(1, 3).permutations();
        assert!(one.iter().all(|p| p == &vec![0]));
    }

    #[test]
    fn transform_round_trip_and_jacobian() {
        let thetas = Tensor::matrix(3, 2, vec![1.0, -1.0, 2.0, 0.0, 4.0, 1.0]).unwrap();
        let t = ParamTransform::fit(&thetas, vec![true, false]).unwrap();
        let back = t.from_flow(&t.to_flow(&thetas).unwrap());
        assert!(back.max_abs_diff(&thetas) < 1e-12);
        // Finite-difference check of the log-Jacobian on the first coordinate.
        let h = 1e-6;
        let f = |x: f64| {
            t.to_flow(&Tensor::matrix(1, 2, vec![x, 0.3]).unwrap())
                .unwrap()
                .get(0, 0)
        };
        let num = ((f(2.0 + h) - f(2.0 - h)) / (2.0 * h)).abs().ln() - t.scale[1].ln();
        assert!((num - t.log_abs_det(&[2.0, 0.3])).abs() < 1e-6);
        assert!(t
            .to_flow(&Tensor::matrix(1, 2, vec![-1.0, 0.0]).unwrap())
            .is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = CouplingFlowConfig::new(2, 2);
        c.scale_clamp = 0.0;
        assert!(c.validate().is_err());
        assert!(CouplingFlowConfig::new(0, 2).validate().is_err());
    }
}
