//! Versioned JSON checkpoints. Parameters are written in registration order
//! with explicit shapes; floats use shortest round-trip formatting, so a
//! load followed by a save reproduces the file byte for byte.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::vocab::Vocabulary;
use crate::domain::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::Tensor;
use crate::training::AdamState;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Seed plus ChaCha word position; the position is a decimal string because
/// it is 128 bits wide.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: u64,
    pub word_pos: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model_config: ModelConfig,
    pub vocabulary: Vocabulary,
    pub step: u64,
    pub rng: RngState,
    pub params: Vec<NamedTensor>,
    pub optimizer: Option<OptimizerState>,
}

#[derive(Deserialize)]
struct VersionProbe {
    format_version: u32,
}

impl Checkpoint {
    pub fn from_model(model: &Model, vocabulary: &Vocabulary, step: u64, rng: RngState, optimizer: Option<&AdamState>) -> Self {
        let store = &model.params;
        let params = store
            .ids()
            .map(|id| {
                let t = store.value(id);
                NamedTensor {
                    name: store.name(id).to_string(),
                    shape: t.shape().to_vec(),
                    values: t.data().to_vec(),
                }
            })
            .collect();
        let optimizer = optimizer.map(|s| OptimizerState {
            step: s.step,
            m: s.m.iter().map(|t| t.data().to_vec()).collect(),
            v: s.v.iter().map(|t| t.data().to_vec()).collect(),
        });
        Self {
            format_version: FORMAT_VERSION,
            model_config: model.config.clone(),
            vocabulary: vocabulary.clone(),
            step,
            rng,
            params,
            optimizer,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec(self)?;
        out.push(b'\n');
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let probe: VersionProbe = serde_json::from_slice(bytes)?;
        if probe.format_version != FORMAT_VERSION {
            return Err(Error::Version {
                found: probe.format_version,
                expected: FORMAT_VERSION,
            });
        }
        Ok(serde_json::from_slice(bytes)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Rebuilds the model, checking every parameter name and shape against
    /// what the stored config registers. With `expected`, the stored config
    /// must equal it.
    pub fn to_model(&self, expected: Option<&ModelConfig>) -> Result<Model> {
        if let Some(want) = expected {
            if want != &self.model_config {
                return Err(Error::ConfigMismatch(config_diff(want, &self.model_config)));
            }
        }
        let mut model = Model::new(self.model_config.clone(), 0)?;
        let names = model.params.names().to_vec();
        if names.len() != self.params.len() {
            return Err(Error::ConfigMismatch(format!(
                "config registers {} parameters, checkpoint has {}",
                names.len(),
                self.params.len()
            )));
        }
        for (name, stored) in names.iter().zip(&self.params) {
            if name != &stored.name {
                return Err(Error::ConfigMismatch(format!("expected parameter {name}, found {}", stored.name)));
            }
            let id = model.params.id(name)?;
            let want = model.params.value(id).shape().to_vec();
            if want != stored.shape {
                return Err(Error::ConfigMismatch(format!(
                    "parameter {name} has shape {:?}, config needs {want:?}",
                    stored.shape
                )));
            }
            *model.params.value_mut(id) = Tensor::new(stored.shape.clone(), stored.values.clone())?;
        }
        Ok(model)
    }

    pub fn optimizer_state(&self, model: &Model) -> Result<Option<AdamState>> {
        let Some(opt) = &self.optimizer else { return Ok(None) };
        let shapes: Vec<Vec<usize>> = model.params.ids().map(|id| model.params.value(id).shape().to_vec()).collect();
        if opt.m.len() != shapes.len() || opt.v.len() != shapes.len() {
            return Err(Error::ConfigMismatch("optimizer moments do not match the parameter list".into()));
        }
        let rebuild = |vals: &[Vec<f64>]| -> Result<Vec<Tensor>> {
            shapes.iter().zip(vals).map(|(s, v)| Tensor::new(s.clone(), v.clone())).collect()
        };
        Ok(Some(AdamState {
            step: opt.step,
            m: rebuild(&opt.m)?,
            v: rebuild(&opt.v)?,
        }))
    }
}

fn config_diff(want: &ModelConfig, found: &ModelConfig) -> String {
    let (a, b) = match (serde_json::to_value(want), serde_json::to_value(found)) {
        (Ok(serde_json::Value::Object(a)), Ok(serde_json::Value::Object(b))) => (a, b),
        _ => return "model configs differ".into(),
    };
    let diffs: Vec<String> = a
        .iter()
        .filter(|(k, v)| b.get(*k) != Some(*v))
        .map(|(k, v)| format!("{k}: expected {v}, checkpoint has {}", b.get(k).cloned().unwrap_or_default()))
        .collect();
    diffs.join(", ")
}
