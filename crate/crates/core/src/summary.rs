//! Summary networks mapping a dataset to a fixed-length vector of width `S`.
//!
//! * [`SummaryKind::DeepSet`] encodes an exchangeable set of rows: a shared
//!   per-row network, mean pooling over rows and a post-pool network. Mean
//!   pooling reduces in a value-sorted order, so outputs are bitwise invariant
//!   to row permutations.
//! * [`SummaryKind::Mlp`] embeds a feature vector of hand-crafted statistics.
//!
//! Both end in an affine bottleneck of width `S` without a nonlinearity.
//! Inputs are standardized per feature with an [`InputNorm`] fitted on pilot
//! simulations.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Bindings, Graph, ParamStore, Var};
use crate::error::{invalid, Error, Result};
use crate::nn::{Activation, Mlp, ParamSource};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Mean,
}

fn default_equivariant() -> Vec<usize> {
    vec![64, 64]
}

fn default_post_pool() -> Vec<usize> {
    vec![64]
}

fn default_mlp_hidden() -> Vec<usize> {
    vec![64, 64, 64]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeepSetConfig {
    pub input_dim: usize,
    #[serde(default = "default_equivariant")]
    pub equivariant_layers: Vec<usize>,
    #[serde(default)]
    pub pooling: Pooling,
    #[serde(default = "default_post_pool")]
    pub post_pool_layers: Vec<usize>,
    pub output_dim: usize,
    #[serde(default)]
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    pub input_dim: usize,
    #[serde(default = "default_mlp_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    pub output_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SummaryConfig {
    DeepSet(DeepSetConfig),
    Mlp(MlpConfig),
}

impl SummaryConfig {
    pub fn deep_set(input_dim: usize, output_dim: usize) -> Self {
        SummaryConfig::DeepSet(DeepSetConfig {
            input_dim,
            equivariant_layers: default_equivariant(),
            pooling: Pooling::Mean,
            post_pool_layers: default_post_pool(),
            output_dim,
            activation: Activation::Tanh,
        })
    }

    pub fn mlp(input_dim: usize, output_dim: usize) -> Self {
        SummaryConfig::Mlp(MlpConfig {
            input_dim,
            hidden: default_mlp_hidden(),
            activation: Activation::Tanh,
            output_dim,
        })
    }

    pub fn input_dim(&self) -> usize {
        match self {
            SummaryConfig::DeepSet(c) => c.input_dim,
            SummaryConfig::Mlp(c) => c.input_dim,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            SummaryConfig::DeepSet(c) => c.output_dim,
            SummaryConfig::Mlp(c) => c.output_dim,
        }
    }

    pub fn is_set_encoder(&self) -> bool {
        matches!(self, SummaryConfig::DeepSet(_))
    }

    pub fn validate(&self) -> Result<()> {
        if self.output_dim() == 0 || self.input_dim() == 0 {
            return Err(invalid(
                "summary input and output dimensions must be at least 1",
            ));
        }
        let widths: Vec<usize> = match self {
            SummaryConfig::DeepSet(c) => {
                if c.equivariant_layers.is_empty() {
                    return Err(invalid("deep set needs at least one equivariant layer"));
                }
                c.equivariant_layers
                    .iter()
                    .chain(&c.post_pool_layers)
                    .copied()
                    .collect()
            }
            SummaryConfig::Mlp(c) => c.hidden.clone(),
        };
        if widths.contains(&0) {
            return Err(invalid("layer widths must be positive"));
        }
        Ok(())
    }
}

/// Per-feature affine standardization `(x - mean) / sd`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputNorm {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

/// Standard deviations below this are treated as 1 (constant features).
const MIN_SD: f64 = 1e-8;

impl InputNorm {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            sd: vec![1.0; dim],
        }
    }

    /// Fits to the rows of every tensor, treating the last axis as features.
    pub fn fit<'a>(samples: impl IntoIterator<Item = &'a Tensor>, dim: usize) -> Result<Self> {
        let mut n = 0usize;
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        for t in samples {
            if t.shape().last() != Some(&dim) {
                return Err(invalid(format!(
                    "expected trailing dimension {dim}, got {:?}",
                    t.shape()
                )));
            }
            for row in t.data().chunks(dim) {
                n += 1;
                for j in 0..dim {
                    sum[j] += row[j];
                    sq[j] += row[j] * row[j];
                }
            }
        }
        if n < 2 {
            return Err(Error::InsufficientSamples(
                "input normalization needs two rows".into(),
            ));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let sd = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let v = (q / n as f64 - m * m).max(0.0) * n as f64 / (n - 1) as f64;
                if v.sqrt() > MIN_SD {
                    v.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, sd })
    }

    pub fn apply(&self, t: &Tensor) -> Tensor {
        let d = self.mean.len();
        let mut out = t.clone();
        for row in out.data_mut().chunks_mut(d) {
            for j in 0..d {
                row[j] = (row[j] - self.mean[j]) / self.sd[j];
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub enum SummaryKind {
    DeepSet { phi: Mlp, rho: Mlp },
    Mlp(Mlp),
}

#[derive(Clone, Debug)]
pub struct SummaryNet {
    pub config: SummaryConfig,
    pub kind: SummaryKind,
    pub norm: InputNorm,
}

/// Datasets summarized per forward pass in [`SummaryNet::summarize`].
const SUMMARIZE_CHUNK: usize = 256;

impl SummaryNet {
    pub fn new(config: SummaryConfig, src: &mut ParamSource) -> Result<Self> {
        config.validate()?;
        let kind = match &config {
            SummaryConfig::DeepSet(c) => {
                let (last, hidden) = c
                    .equivariant_layers
                    .split_last()
                    .expect("validated non-empty");
                let phi = Mlp::new(
                    src,
                    "summary.phi",
                    c.input_dim,
                    hidden,
                    *last,
                    c.activation,
                    false,
                )?;
                let rho = Mlp::new(
                    src,
                    "summary.rho",
                    *last,
                    &c.post_pool_layers,
                    c.output_dim,
                    c.activation,
                    false,
                )?;
                SummaryKind::DeepSet { phi, rho }
            }
            SummaryConfig::Mlp(c) => SummaryKind::Mlp(Mlp::new(
                src,
                "summary.mlp",
                c.input_dim,
                &c.hidden,
                c.output_dim,
                c.activation,
                false,
            )?),
        };
        Ok(Self {
            norm: InputNorm::identity(config.input_dim()),
            config,
            kind,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        let want_rank = if self.config.is_set_encoder() { 3 } else { 2 };
        let ok = batch.rank() == want_rank
            && batch.shape()[want_rank - 1] == self.config.input_dim()
            && batch.shape()[..want_rank - 1].iter().all(|&e| e > 0);
        if !ok {
            return Err(Error::Shape {
                op: "summary_forward",
                lhs: batch.shape().to_vec(),
                rhs: vec![self.config.input_dim()],
            });
        }
        Ok(())
    }

    /// Summaries `[B, S]` of a raw batch: `[B, K, d]` for set encoders,
    /// `[B, d]` for feature embedders.
    pub fn forward(&self, g: &mut Graph, p: &Bindings, batch: &Tensor) -> Result<Var> {
        self.check_batch(batch)?;
        let x = g.input(self.norm.apply(batch));
        match &self.kind {
            SummaryKind::DeepSet { phi, rho } => {
                let (b, k, d) = (batch.shape()[0], batch.shape()[1], batch.shape()[2]);
                let rows = g.reshape(x, &[b * k, d])?;
                let h = phi.forward_all_activated(g, p, rows)?;
                let width = phi.output_dim();
                let h = g.reshape(h, &[b, k, width])?;
                let pooled = g.mean_axis(h, 1)?;
                let post = rho.forward(g, p, pooled)?;
                Ok(post)
            }
            SummaryKind::Mlp(m) => m.forward(g, p, x),
        }
    }

    /// Summaries of a batch without recording gradients.
    pub fn summarize(&self, store: &ParamStore, batch: &Tensor) -> Result<Tensor> {
        self.check_batch(batch)?;
        let n = batch.shape()[0];
        let per = batch.len() / n;
        let mut out = Vec::with_capacity(n * self.output_dim());
        for start in (0..n).step_by(SUMMARIZE_CHUNK) {
            let end = (start + SUMMARIZE_CHUNK).min(n);
            let mut shape = batch.shape().to_vec();
            shape[0] = end - start;
            let chunk = Tensor::new(shape, batch.data()[start * per..end * per].to_vec())?;
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let s = self.forward(&mut g, &p, &chunk)?;
            out.extend_from_slice(g.value(s).data());
        }
        Tensor::new(vec![n, self.output_dim()], out)
    }

    /// Summary of one `K x d` dataset (set encoder) or `d`-vector (embedder).
    pub fn summarize_one(&self, store: &ParamStore, x: &Tensor) -> Result<Vec<f64>> {
        let mut shape = vec![1];
        shape.extend_from_slice(x.shape());
        let batch = x.clone().reshape(&shape)?;
        Ok(self.summarize(store, &batch)?.into_data())
    }
}
