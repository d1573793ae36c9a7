use std::fs;
use std::path::{Path, PathBuf};

use progtrig::experiment::EvalConfig;
use progtrig::frontend::FrontendConfig;
use progtrig::model::ModelConfig;
use progtrig::scorer::{Aggregation, StubConfig};
use progtrig::synthgen::GenConfig;
use progtrig::trainer::TrainConfig;
use progtrig::util::derive_seed;
use progtrig::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// Everything a run needs. Module seeds are derived from `seed` when the
/// run starts, so the per-module `seed` fields in a config file are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub frontend: FrontendConfig,
    pub gen: GenConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub stub: StubConfig,
    pub aggregation: Aggregation,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = Self {
            seed: 1,
            paths: Paths::default(),
            frontend: FrontendConfig::default(),
            gen: GenConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            stub: StubConfig::default(),
            aggregation: Aggregation::default(),
        };
        cfg.derive_seeds();
        cfg
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn derive_seeds(&mut self) {
        self.gen.seed = derive_seed(self.seed, "gen");
        self.train.seed = derive_seed(self.seed, "train");
    }

    /// Model input and output sizes follow the frontend and the alphabet.
    pub fn sync_model_shape(&mut self) {
        self.model.input_dim = self.frontend.feature_dim();
        self.model.phonetic_classes = self.gen.alphabet.num_classes();
    }

    pub fn validate(&self) -> Result<()> {
        self.frontend.validate()?;
        self.gen.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.eval.validate()
    }

    pub fn corpus(&self) -> Result<&Path> {
        self.paths
            .corpus
            .as_deref()
            .ok_or_else(|| Error::Config("no corpus directory given (--corpus)".into()))
    }

    pub fn checkpoint(&self) -> Result<&Path> {
        self.paths
            .checkpoint
            .as_deref()
            .ok_or_else(|| Error::Config("no checkpoint given (--checkpoint)".into()))
    }

    pub fn out(&self) -> Result<&Path> {
        self.paths
            .out
            .as_deref()
            .ok_or_else(|| Error::Config("no output directory given (--out)".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_json() {
        let mut cfg = RunConfig {
            seed: 42,
            ..RunConfig::default()
        };
        cfg.paths.corpus = Some("corpus".into());
        cfg.train.max_steps = 7;
        cfg.eval.contexts = vec![0.3, 0.75];
        cfg.derive_seeds();
        let back: RunConfig = serde_json::from_str(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"seed": 3, "train": {"max_steps": 5}}"#).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.train.max_steps, 5);
        assert_eq!(cfg.train.learning_rate, 0.0008);
        assert_eq!(cfg.train.clip_norm, 20.0);
    }
}
