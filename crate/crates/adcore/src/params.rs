// SPDX-License-Identifier: MIT OR Apache-2.0

//! Named parameters, Adam state and on-disk checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;
use crate::AdError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub first_moment: Tensor,
    pub second_moment: Tensor,
    pub step: u64,
}

impl Param {
    fn new(value: Tensor) -> Self {
        let (r, c) = value.shape();
        Self {
            value,
            first_moment: Tensor::zeros(r, c),
            second_moment: Tensor::zeros(r, c),
            step: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    pub adam: AdamConfig,
}

/// Parameters placed on a graph as leaves, keyed by name.
#[derive(Clone, Debug, Default)]
pub struct BoundParams {
    vars: BTreeMap<String, (Var, (usize, usize))>,
}

impl BoundParams {
    /// Panics on an unknown name: parameter names are fixed by the model code.
    pub fn var(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some((v, _)) => *v,
            None => panic!("parameter `{name}` not bound"),
        }
    }

    /// Gradient per parameter; parameters that do not reach the output get zeros.
    pub fn gradients(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(name, (var, shape))| (name.clone(), grads.get_or_zeros(*var, *shape)))
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: [usize; 2],
    file: String,
    adam_step: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    adam: AdamConfig,
    tensors: Vec<ManifestEntry>,
}

const MANIFEST: &str = "manifest.json";
const FORMAT: &str = "somnus-params-v1";

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), Param::new(value));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name).map(|p| &mut p.value)
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, p)| (k.as_str(), &p.value))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Step count of the most-updated parameter.
    pub fn step(&self) -> u64 {
        self.params.values().map(|p| p.step).max().unwrap_or(0)
    }

    pub fn bind(&self, graph: &mut Graph) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|(name, p)| (name.clone(), (graph.leaf(p.value.clone()), p.value.shape())))
            .collect();
        BoundParams { vars }
    }

    /// One bias-corrected Adam update. `grads` must carry exactly the stored
    /// names with matching shapes.
    pub fn adam_step(&mut self, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<(), AdError> {
        let missing = self.params.keys().find(|k| !grads.contains_key(*k));
        let extra = grads.keys().find(|k| !self.params.contains_key(*k));
        if let Some(name) = missing.or(extra) {
            return Err(AdError::KeyMismatch { name: name.clone() });
        }
        for (name, g) in grads {
            let p = &self.params[name];
            if p.value.shape() != g.shape() {
                return Err(AdError::ShapeMismatch {
                    op: "adam_step",
                    left: p.value.shape(),
                    right: g.shape(),
                });
            }
        }
        let AdamConfig {
            beta1,
            beta2,
            epsilon,
        } = self.adam;
        for (name, g) in grads {
            let p = self.params.get_mut(name).expect("checked above");
            p.step += 1;
            let bc1 = 1.0 - beta1.powi(p.step as i32);
            let bc2 = 1.0 - beta2.powi(p.step as i32);
            let m = p.first_moment.data_mut();
            let v = p.second_moment.data_mut();
            let w = p.value.data_mut();
            for i in 0..w.len() {
                let gi = g.data()[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                w[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }

    /// Writes `manifest.json` plus one little-endian `f64` blob per tensor.
    /// Adam moments are not persisted; a reloaded store restarts them at zero.
    pub fn save(&self, dir: &Path) -> Result<(), AdError> {
        fs::create_dir_all(dir)?;
        let mut tensors = Vec::with_capacity(self.params.len());
        for (name, p) in &self.params {
            let file = format!("{}.bin", name.replace(['/', '\\'], "_"));
            let mut bytes = Vec::with_capacity(p.value.len() * 8);
            for v in p.value.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            fs::write(dir.join(&file), bytes)?;
            tensors.push(ManifestEntry {
                name: name.clone(),
                shape: [p.value.rows(), p.value.cols()],
                file,
                adam_step: p.step,
            });
        }
        let manifest = Manifest {
            format: FORMAT.to_string(),
            adam: self.adam,
            tensors,
        };
        fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, AdError> {
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST))?)?;
        if manifest.format != FORMAT {
            return Err(AdError::Checkpoint(format!(
                "unknown format `{}`",
                manifest.format
            )));
        }
        let mut store = ParamStore {
            params: BTreeMap::new(),
            adam: manifest.adam,
        };
        for entry in manifest.tensors {
            let bytes = fs::read(dir.join(&entry.file))?;
            let [rows, cols] = entry.shape;
            if bytes.len() != rows * cols * 8 {
                return Err(AdError::Checkpoint(format!(
                    "`{}` holds {} bytes, expected {}",
                    entry.file,
                    bytes.len(),
                    rows * cols * 8
                )));
            }
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            let mut param = Param::new(Tensor::from_vec(rows, cols, data)?);
            param.step = entry.adam_step;
            store.params.insert(entry.name, param);
        }
        Ok(store)
    }
}
