use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{InputNorm, NetworkModel, TensorKind, CHANNELS, CLASSES, F1, F2, HIDDEN, KH};
use crate::error::{Error, Result};

pub const MODEL_FORMAT: &str = "edgesense-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv2d { filters: usize, kernel: [usize; 2], activation: String },
    MaxPool2d { pool: [usize; 2] },
    Flatten,
    Dense { units: usize, activation: String },
}

fn architecture() -> Vec<LayerSpec> {
    let conv = |filters| LayerSpec::Conv2d { filters, kernel: [KH, 1], activation: "relu".into() };
    vec![
        conv(F1),
        LayerSpec::MaxPool2d { pool: [2, 1] },
        conv(F2),
        LayerSpec::MaxPool2d { pool: [2, 1] },
        LayerSpec::Flatten,
        LayerSpec::Dense { units: HIDDEN, activation: "relu".into() },
        LayerSpec::Dense { units: CLASSES, activation: "softmax".into() },
    ]
}

/// Provenance of a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingMeta {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    pub samples: usize,
    pub final_loss: f64,
    pub final_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRecord {
    pub name: String,
    pub kind: TensorKind,
    pub shape: Vec<usize>,
    /// Row-major values.
    pub values: Vec<f64>,
}

/// Versioned on-disk form of [`NetworkModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub format: String,
    pub version: u32,
    pub input_len: usize,
    pub channels: usize,
    pub lambda: f64,
    pub input_norm: InputNorm,
    pub layers: Vec<LayerSpec>,
    pub tensors: Vec<TensorRecord>,
    pub training: Option<TrainingMeta>,
}

impl NetworkModel {
    pub fn to_file(&self) -> ModelFile {
        ModelFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            input_len: self.input_len,
            channels: CHANNELS,
            lambda: self.lambda,
            input_norm: self.input_norm.clone(),
            layers: architecture(),
            tensors: self
                .tensors()
                .into_iter()
                .map(|t| TensorRecord {
                    name: t.name.into(),
                    kind: t.kind,
                    shape: t.shape,
                    values: self.params[t.range].to_vec(),
                })
                .collect(),
            training: self.training.clone(),
        }
    }

    pub fn from_file(file: &ModelFile) -> Result<Self> {
        if file.format != MODEL_FORMAT {
            return Err(Error::validation(format!("not a model file (format {:?})", file.format)));
        }
        if file.version != MODEL_VERSION {
            return Err(Error::validation(format!("unsupported model version {}", file.version)));
        }
        if file.channels != CHANNELS || file.layers != architecture() {
            return Err(Error::validation("model architecture does not match this build"));
        }
        let mut m = NetworkModel::zeros(file.input_len)?;
        let specs = m.tensors();
        if specs.len() != file.tensors.len() {
            return Err(Error::Shape { expected: format!("{} tensors", specs.len()), got: file.tensors.len().to_string() });
        }
        for (spec, rec) in specs.iter().zip(&file.tensors) {
            if rec.name != spec.name || rec.shape != spec.shape || rec.values.len() != spec.range.len() {
                return Err(Error::Shape {
                    expected: format!("{} {:?}", spec.name, spec.shape),
                    got: format!("{} {:?} with {} values", rec.name, rec.shape, rec.values.len()),
                });
            }
            if rec.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::validation(format!("tensor {} has non-finite values", rec.name)));
            }
            m.params[spec.range.clone()].copy_from_slice(&rec.values);
        }
        m.lambda = file.lambda;
        m.input_norm = file.input_norm.clone();
        m.training = file.training.clone();
        Ok(m)
    }
}

pub fn save_model(model: &NetworkModel, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(&model.to_file())?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<NetworkModel> {
    let file: ModelFile = serde_json::from_slice(&std::fs::read(path)?)?;
    NetworkModel::from_file(&file)
}
