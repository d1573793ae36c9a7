//! Checkpoint container.
//!
//! Layout on disk:
//!
//! ```text
//! magic    8 bytes   "PTRGCKPT"
//! hlen     u64 LE    length of the JSON header in bytes
//! header   hlen      UTF-8 JSON (see `Header`)
//! data     ...       little-endian f32 tensors, at the header's offsets
//! ```
//!
//! The header carries a mandatory `version`, the model and frontend
//! configurations, the training step, and a tensor directory of
//! `{name, shape, dtype, offset}` with offsets relative to the start of the
//! data section. Besides the model parameters the directory holds the
//! feature normalization (`norm.mean`, `norm.std`) and, for resumable
//! checkpoints, the Adam moments (`adam.m/<param>`, `adam.v/<param>`).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::{FrontendConfig, Normalizer};
use crate::model::{Model, ModelConfig};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"PTRGCKPT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    model: ModelConfig,
    frontend: FrontendConfig,
    step: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    adam_step: Option<u64>,
    tensors: Vec<TensorEntry>,
}

/// First and second moment estimates, laid out like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub model: Model<f32>,
    pub frontend: FrontendConfig,
    pub normalizer: Normalizer,
    pub step: u64,
    pub optimizer: Option<AdamState>,
}

impl ModelCheckpoint {
    pub fn init(model: ModelConfig, frontend: FrontendConfig, seed: u64) -> Result<Self> {
        frontend.validate()?;
        if model.input_dim != frontend.feature_dim() {
            return Err(Error::Config(format!(
                "model input_dim {} does not match frontend feature dim {}",
                model.input_dim,
                frontend.feature_dim()
            )));
        }
        let bins = frontend.mel_bins;
        Ok(Self {
            model: Model::init(model, seed)?,
            frontend,
            normalizer: Normalizer::identity(bins),
            step: 0,
            optimizer: None,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut data: Vec<u8> = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, values: &[f32]| {
            tensors.push(TensorEntry {
                name,
                shape,
                dtype: "f32".into(),
                offset: data.len(),
            });
            for v in values {
                data.extend_from_slice(&v.to_le_bytes());
            }
        };
        let layout = &self.model.layout;
        for t in &layout.tensors {
            push(t.name.clone(), t.shape.clone(), &self.model.params[t.range()]);
        }
        push("norm.mean".into(), vec![self.normalizer.mean.len()], &self.normalizer.mean);
        push("norm.std".into(), vec![self.normalizer.std.len()], &self.normalizer.std);
        if let Some(opt) = &self.optimizer {
            for (prefix, buf) in [("adam.m", &opt.m), ("adam.v", &opt.v)] {
                for t in &layout.tensors {
                    push(format!("{prefix}/{}", t.name), t.shape.clone(), &buf[t.range()]);
                }
            }
        }
        let header = Header {
            version: CHECKPOINT_VERSION,
            model: self.model.config.clone(),
            frontend: self.frontend.clone(),
            step: self.step,
            adam_step: self.optimizer.as_ref().map(|o| o.step),
            tensors,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing checkpoint magic".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = 16usize
            .checked_add(hlen)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| bad("truncated header".into()))?;
        let header: Header =
            serde_json::from_slice(&bytes[16..body]).map_err(|e| bad(format!("header: {e}")))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(bad(format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                header.version
            )));
        }
        let data = &bytes[body..];
        let read = |name: &str, shape: &[usize]| -> Result<Vec<f32>> {
            let entry = header
                .tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| bad(format!("missing tensor {name}")))?;
            if entry.shape != shape || entry.dtype != "f32" {
                return Err(bad(format!(
                    "tensor {name}: expected f32 {shape:?}, found {} {:?}",
                    entry.dtype, entry.shape
                )));
            }
            let n: usize = shape.iter().product();
            let end = entry.offset + 4 * n;
            if end > data.len() {
                return Err(bad(format!("tensor {name} runs past end of file")));
            }
            let values: Vec<f32> = data[entry.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if values.iter().any(|v| !v.is_finite()) {
                return Err(bad(format!("tensor {name} has non-finite values")));
            }
            Ok(values)
        };

        let model_cfg = header.model.clone();
        model_cfg.validate()?;
        let layout = crate::model::ParamLayout::new(&model_cfg);
        let mut params = vec![0f32; layout.total];
        for t in &layout.tensors {
            params[t.range()].copy_from_slice(&read(&t.name, &t.shape)?);
        }
        let bins = header.frontend.mel_bins;
        let normalizer = Normalizer {
            mean: read("norm.mean", &[bins])?,
            std: read("norm.std", &[bins])?,
        };
        let optimizer = match header.adam_step {
            None => None,
            Some(step) => {
                let mut m = vec![0f32; layout.total];
                let mut v = vec![0f32; layout.total];
                for t in &layout.tensors {
                    m[t.range()].copy_from_slice(&read(&format!("adam.m/{}", t.name), &t.shape)?);
                    v[t.range()].copy_from_slice(&read(&format!("adam.v/{}", t.name), &t.shape)?);
                }
                Some(AdamState { step, m, v })
            }
        };
        Ok(Self {
            model: Model::from_params(model_cfg, params)?,
            frontend: header.frontend,
            normalizer,
            step: header.step,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::format(path, m),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelCheckpoint {
        let model = ModelConfig {
            hidden_per_direction: 4,
            phonetic_classes: 5,
            ..ModelConfig::default()
        };
        let mut ck = ModelCheckpoint::init(model, FrontendConfig::default(), 1).unwrap();
        ck.normalizer.mean[3] = 0.25;
        ck.step = 17;
        ck
    }

    #[test]
    fn round_trip_without_optimizer() {
        let ck = tiny();
        assert_eq!(ModelCheckpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap(), ck);
    }

    #[test]
    fn round_trip_with_optimizer() {
        let mut ck = tiny();
        let mut opt = AdamState::new(ck.model.num_params());
        opt.step = 17;
        opt.m[5] = 0.5;
        opt.v[9] = 1e-7;
        ck.optimizer = Some(opt);
        assert_eq!(ModelCheckpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap(), ck);
    }

    #[test]
    fn header_is_readable_json_with_version() {
        let bytes = tiny().to_bytes().unwrap();
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let v: serde_json::Value = serde_json::from_slice(&bytes[16..16 + hlen]).unwrap();
        assert_eq!(v["version"], 1);
        assert_eq!(v["tensors"][0]["name"], "lstm.0.fwd.w_x");
        assert_eq!(v["tensors"][0]["offset"], 0);
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let mut bytes = tiny().to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(ModelCheckpoint::from_bytes(&bytes).is_err());

        let ck = tiny();
        let bytes = ck.to_bytes().unwrap();
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header = String::from_utf8(bytes[16..16 + hlen].to_vec()).unwrap();
        let patched = header.replacen("\"version\":1", "\"version\":9", 1);
        let mut out = bytes[..8].to_vec();
        out.extend_from_slice(&(patched.len() as u64).to_le_bytes());
        out.extend_from_slice(patched.as_bytes());
        out.extend_from_slice(&bytes[16 + hlen..]);
        let err = ModelCheckpoint::from_bytes(&out).unwrap_err();
        assert!(err.to_string().contains("unsupported version 9"));
    }

    #[test]
    fn rejects_mismatched_input_dim() {
        let model = ModelConfig {
            input_dim: 100,
            ..ModelConfig::default()
        };
        assert!(ModelCheckpoint::init(model, FrontendConfig::default(), 0).is_err());
    }
}
