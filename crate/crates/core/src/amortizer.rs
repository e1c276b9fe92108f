//! A summary network and a conditional flow sharing one parameter store,
//! together with the fixed input and parameter transforms fitted on pilot
//! simulations.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Bindings, Graph, ParamStore, Var};
use crate::error::{invalid, Error, Result};
use crate::flow::{CouplingFlow, CouplingFlowConfig, ParamTransform};
use crate::nn::ParamSource;
use crate::rng::RngState;
use crate::simulators::{simulate_batch, DataShape, GenerativeModel};
use crate::summary::{InputNorm, SummaryConfig, SummaryNet};
use crate::tensor::Tensor;

pub const BUNDLE_FILE: &str = "amortizer.json";
pub const PARAMS_DIR: &str = "params";

#[derive(Clone, Debug)]
pub struct Amortizer {
    pub summary: SummaryNet,
    pub flow: CouplingFlow,
    pub store: ParamStore,
    pub transform: ParamTransform,
    pub data_shape: DataShape,
    pub param_names: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Bundle {
    summary: SummaryConfig,
    flow: CouplingFlowConfig,
    permutations: Vec<Vec<usize>>,
    input_norm: InputNorm,
    transform: ParamTransform,
    data_shape: DataShape,
    param_names: Vec<String>,
}

impl Amortizer {
    /// Fresh networks for `model`. The flow's condition width must equal the
    /// summary width.
    pub fn new(
        model: &dyn GenerativeModel,
        summary: SummaryConfig,
        flow: CouplingFlowConfig,
        rng: &mut RngState,
    ) -> Result<Self> {
        let shape = model.data_shape();
        let set_ok = matches!(
            (&summary, shape),
            (SummaryConfig::DeepSet(_), DataShape::Set { .. })
                | (SummaryConfig::Mlp(_), DataShape::Vector { .. })
        );
        if !set_ok || summary.input_dim() != shape.feature_dim() {
            return Err(invalid(format!(
                "summary network (input {}) does not fit {} data of shape {shape:?}",
                summary.input_dim(),
                model.name()
            )));
        }
        if flow.theta_dim != model.theta_dim() || flow.cond_dim != summary.output_dim() {
            return Err(invalid(format!(
                "flow dims ({}, {}) must equal (theta_dim {}, summary width {})",
                flow.theta_dim,
                flow.cond_dim,
                model.theta_dim(),
                summary.output_dim()
            )));
        }
        let mut store = ParamStore::new();
        let mut src = ParamSource::Init(&mut store, rng);
        let summary = SummaryNet::new(summary, &mut src)?;
        let flow = CouplingFlow::new(flow, &mut src)?;
        Ok(Self {
            summary,
            flow,
            store,
            transform: ParamTransform::identity(model.theta_dim()),
            data_shape: shape,
            param_names: model.param_names(),
        })
    }

    /// Fits input standardization and the parameter transform on `n` prior
    /// predictive draws.
    pub fn fit_pilot(
        &mut self,
        model: &dyn GenerativeModel,
        rng: &RngState,
        n: usize,
    ) -> Result<()> {
        let (thetas, data) = simulate_batch(model, rng, n)?;
        self.summary.norm = InputNorm::fit([&data], self.data_shape.feature_dim())?;
        self.transform = ParamTransform::fit(&thetas, model.positive_params())?;
        Ok(())
    }

    pub fn theta_dim(&self) -> usize {
        self.flow.config.theta_dim
    }

    pub fn summary_dim(&self) -> usize {
        self.summary.output_dim()
    }

    /// Per-row log posterior density in flow coordinates `[B]`, from raw θ
    /// rows and a raw data batch, plus the summary node `[B, S]`.
    pub fn log_prob_graph(
        &self,
        g: &mut Graph,
        p: &Bindings,
        thetas: &Tensor,
        batch: &Tensor,
    ) -> Result<(Var, Var)> {
        let z = self.summary.forward(g, p, batch)?;
        let t = g.input(self.transform.to_flow(thetas)?);
        let lp = self.flow.log_prob(g, p, t, z)?;
        Ok((lp, z))
    }

    /// Summaries `[N, S]` of a batch of datasets.
    pub fn summarize(&self, batch: &Tensor) -> Result<Tensor> {
        self.summary.summarize(&self.store, batch)
    }

    fn batch_of_one(&self, x: &Tensor) -> Result<Tensor> {
        let mut shape = vec![1];
        shape.extend_from_slice(x.shape());
        x.clone().reshape(&shape)
    }

    /// `L` posterior draws (θ scale) for one dataset.
    pub fn sample_posterior(&self, x: &Tensor, l: usize, rng: &mut RngState) -> Result<Tensor> {
        let z = self.summarize(&self.batch_of_one(x)?)?;
        self.sample_given_summary(z.row(0), l, rng)
    }

    pub fn sample_given_summary(&self, z: &[f64], l: usize, rng: &mut RngState) -> Result<Tensor> {
        let flow_draws = self.flow.sample(&self.store, z, l, rng)?;
        Ok(self.transform.from_flow(&flow_draws))
    }

    /// Log posterior density of θ given one dataset, on the θ scale.
    pub fn log_prob(&self, theta: &[f64], x: &Tensor) -> Result<f64> {
        let z = self.summarize(&self.batch_of_one(x)?)?;
        let t = self
            .transform
            .to_flow(&Tensor::matrix(1, theta.len(), theta.to_vec())?)?;
        let lp = self.flow.log_prob_values(&self.store, &t, &z)?[0];
        Ok(lp + self.transform.log_abs_det(theta))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let bundle = Bundle {
            summary: self.summary.config.clone(),
            flow: self.flow.config.clone(),
            permutations: self.flow.permutations(),
            input_norm: self.summary.norm.clone(),
            transform: self.transform.clone(),
            data_shape: self.data_shape,
            param_names: self.param_names.clone(),
        };
        std::fs::write(
            dir.join(BUNDLE_FILE),
            serde_json::to_string_pretty(&bundle)?,
        )?;
        self.store.save(&dir.join(PARAMS_DIR))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let bundle: Bundle = serde_json::from_slice(&std::fs::read(dir.join(BUNDLE_FILE))?)?;
        let store = ParamStore::load(&dir.join(PARAMS_DIR))?;
        let mut src = ParamSource::Attach(&store);
        let mut summary = SummaryNet::new(bundle.summary, &mut src)?;
        let flow = CouplingFlow::new(bundle.flow, &mut src)?;
        if flow.permutations() != bundle.permutations {
            return Err(Error::Format(
                "stored flow permutations disagree with the configured seed".into(),
            ));
        }
        summary.norm = bundle.input_norm;
        Ok(Self {
            summary,
            flow,
            store,
            transform: bundle.transform,
            data_shape: bundle.data_shape,
            param_names: bundle.param_names,
        })
    }
}
