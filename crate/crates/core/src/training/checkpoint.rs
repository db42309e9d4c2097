use std::collections::BTreeMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::data::Vocabulary;
use crate::model::{Model, ModelConfig};
use crate::tensor::{ParameterStore, Tensor};

use super::TrainError;

pub const FORMAT_VERSION: u32 = 1;

/// A model together with the vocabulary it was trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub vocab: Option<Vocabulary>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    shape: Vec<usize>,
    data_b64: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format_version: u32,
    config: ModelConfig,
    params: BTreeMap<String, ParamEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vocab: Option<Vocabulary>,
}

fn corrupt(msg: impl Into<String>) -> TrainError {
    TrainError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        let params = self
            .model
            .params
            .iter()
            .map(|(name, t)| {
                let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
                (
                    name.to_string(),
                    ParamEntry {
                        shape: t.shape().to_vec(),
                        data_b64: STANDARD.encode(bytes),
                    },
                )
            })
            .collect();
        let file = CheckpointFile {
            format_version: FORMAT_VERSION,
            config: self.model.config.clone(),
            params,
            vocab: self.vocab.clone(),
        };
        serde_json::to_string(&file).expect("checkpoints always serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, TrainError> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| corrupt(format!("not JSON: {e}")))?;
        match value.get("format_version").and_then(serde_json::Value::as_u64) {
            Some(v) if v == FORMAT_VERSION as u64 => {}
            Some(v) => {
                return Err(TrainError::Version {
                    found: v,
                    expected: FORMAT_VERSION,
                })
            }
            None => return Err(corrupt("missing format_version")),
        }
        let file: CheckpointFile = serde_path_to_error::deserialize(value)
            .map_err(|e| corrupt(format!("{}: {}", e.path(), e.inner())))?;
        let mut params = ParameterStore::new();
        for (name, entry) in file.params {
            let bytes = STANDARD
                .decode(entry.data_b64.as_bytes())
                .map_err(|e| corrupt(format!("parameter `{name}`: bad base64: {e}")))?;
            if bytes.len() % 4 != 0 {
                return Err(corrupt(format!("parameter `{name}`: truncated data")));
            }
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let tensor = Tensor::new(entry.shape, data)
                .map_err(|e| corrupt(format!("parameter `{name}`: {e}")))?;
            params
                .insert(name, tensor)
                .map_err(|e| corrupt(e.to_string()))?;
        }
        let model = Model::from_parts(file.config, params)?;
        if let Some(v) = &file.vocab {
            if v.len() != model.config.vocab_size {
                return Err(corrupt(format!(
                    "vocabulary has {} tokens, config says {}",
                    v.len(),
                    model.config.vocab_size
                )));
            }
        }
        Ok(Checkpoint {
            model,
            vocab: file.vocab,
        })
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<(), TrainError> {
    let path = path.as_ref();
    std::fs::write(path, ckpt.to_json()).map_err(|e| TrainError::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, TrainError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| TrainError::io(path, e))?;
    Checkpoint::from_json(&text)
}
