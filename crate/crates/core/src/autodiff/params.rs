use std::path::Path;

use serde::{Deserialize, Serialize};

use super::graph::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Tensor, FORMAT_VERSION};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named trainable tensors with a flat view for the optimizer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Graph nodes for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bindings(Vec<Var>);

impl std::ops::Index<ParamId> for Bindings {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u16,
    dtype: String,
    entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "params.json";

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.names.push(name);
        self.tensors.push(value);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::Shape {
                op: "unflatten",
                lhs: vec![self.num_scalars()],
                rhs: vec![flat.len()],
            });
        }
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Inserts every parameter as a leaf on `g`.
    pub fn bind(&self, g: &mut Graph) -> Bindings {
        Bindings(
            self.tensors
                .iter()
                .enumerate()
                .map(|(i, t)| g.param(ParamId(i), t.clone()))
                .collect(),
        )
    }

    /// Flat gradient aligned with [`ParamStore::flatten`]. Parameters bound more
    /// than once have their adjoints summed.
    pub fn flat_grads(&self, g: &Graph, grads: &Gradients) -> Vec<f64> {
        let mut offsets = Vec::with_capacity(self.tensors.len());
        let mut off = 0;
        for t in &self.tensors {
            offsets.push(off);
            off += t.len();
        }
        let mut flat = vec![0.0; off];
        for (node, id) in g.param_nodes() {
            if let Some(gt) = grads.param_grad(node) {
                let o = offsets[id.0];
                for (f, v) in flat[o..o + gt.len()].iter_mut().zip(gt.data()) {
                    *f += v;
                }
            }
        }
        flat
    }

    /// Writes one tensor file per entry plus a JSON manifest into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.len());
        for (i, (name, t)) in self.names.iter().zip(&self.tensors).enumerate() {
            let file = format!("{i:03}_{}.msbi", name.replace(['/', '\\'], "_"));
            t.save(dir.join(&file))?;
            entries.push(ManifestEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                file,
            });
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            dtype: "f64".into(),
            entries,
        };
        std::fs::write(
            dir.join(MANIFEST_FILE),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_slice(&std::fs::read(dir.join(MANIFEST_FILE))?)?;
        if manifest.format_version != FORMAT_VERSION || manifest.dtype != "f64" {
            return Err(Error::Format(format!(
                "unsupported checkpoint (version {}, dtype {})",
                manifest.format_version, manifest.dtype
            )));
        }
        let mut store = Self::new();
        for e in manifest.entries {
            let t = Tensor::load(dir.join(&e.file))?;
            if t.shape() != e.shape.as_slice() {
                return Err(Error::Format(format!(
                    "shape of {} disagrees with manifest",
                    e.name
                )));
            }
            store.add(e.name, t)?;
        }
        Ok(store)
    }
}
