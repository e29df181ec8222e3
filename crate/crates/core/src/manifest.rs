//! Experiment manifests: everything a CLI run needs, in one TOML file.
//!
//! ```toml
//! seed = 7
//! policies = ["full", "corm:8+8"]
//! checkpoints = [64, 128, 256]
//! out = "runs/demo"
//! new_tokens = 32
//! model_config = "toy.toml"   # or an inline [model] table
//!
//! [input]
//! kind = "synthetic"
//! length = 256
//! seeds = [1, 2, 3]
//! ```
//!
//! Relative paths resolve against the manifest's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CormError, Result};
use crate::kv_cache::{PolicyConfig, ThresholdMode};
use crate::model::{Model, ModelConfig, Weights};
use crate::text;
use crate::trace::{ScoreMode, DEFAULT_TRACE_CAP};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InputSource {
    /// Whitespace-separated token ids, or raw text encoded byte by byte if
    /// the file does not parse as ids.
    File { path: PathBuf },
    /// One seeded synthetic text per seed.
    Synthetic { length: usize, seeds: Vec<u64> },
}

fn default_new_tokens() -> usize {
    32
}

fn default_trace_cap() -> u64 {
    DEFAULT_TRACE_CAP
}

fn default_grid_limit() -> usize {
    256
}

fn default_policies() -> Vec<PolicyConfig> {
    vec![PolicyConfig::Full]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentManifest {
    /// Seed for sampling. Model and input seeds live in their own sections.
    pub seed: u64,
    #[serde(default = "default_policies")]
    pub policies: Vec<PolicyConfig>,
    pub input: Option<InputSource>,
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub checkpoints: Vec<usize>,
    #[serde(default)]
    pub threshold: ThresholdMode,
    pub model_config: Option<PathBuf>,
    pub model: Option<ModelConfig>,
    pub weights: Option<PathBuf>,
    pub trace: Option<PathBuf>,
    #[serde(default = "default_trace_cap")]
    pub trace_cap: u64,
    #[serde(default = "default_new_tokens")]
    pub new_tokens: usize,
    /// Sample from the `top_k` most likely tokens instead of greedy decoding.
    pub top_k: Option<usize>,
    #[serde(default)]
    pub replay_scores: ScoreMode,
    /// Steps kept in the similarity and overlap grids of `analyze`.
    #[serde(default = "default_grid_limit")]
    pub grid_limit: usize,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for ExperimentManifest {
    fn default() -> Self {
        ExperimentManifest {
            seed: 0,
            policies: default_policies(),
            input: None,
            out: None,
            checkpoints: Vec::new(),
            threshold: ThresholdMode::default(),
            model_config: None,
            model: None,
            weights: None,
            trace: None,
            trace_cap: DEFAULT_TRACE_CAP,
            new_tokens: default_new_tokens(),
            top_k: None,
            replay_scores: ScoreMode::default(),
            grid_limit: default_grid_limit(),
            base_dir: PathBuf::new(),
        }
    }
}

impl ExperimentManifest {
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let mut m: ExperimentManifest =
            toml::from_str(text).map_err(|e| CormError::InvalidConfig(format!("manifest: {e}")))?;
        m.base_dir = base_dir.to_path_buf();
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CormError::io(path, e))?;
        Self::from_toml_str(&text, path.parent().unwrap_or(Path::new("")))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    /// Checks that required fields are present, referenced files exist and
    /// every size is usable.
    pub fn validate(&self) -> Result<()> {
        if self.policies.is_empty() {
            return Err(CormError::InvalidConfig(
                "manifest lists no policies".into(),
            ));
        }
        for p in &self.policies {
            p.validate()?;
        }
        let mut slugs: Vec<String> = self.policies.iter().map(PolicyConfig::slug).collect();
        slugs.sort();
        if let Some(w) = slugs.windows(2).find(|w| w[0] == w[1]) {
            return Err(CormError::InvalidConfig(format!(
                "policy {} listed twice",
                w[0]
            )));
        }
        if self.model.is_some() && self.model_config.is_some() {
            return Err(CormError::InvalidConfig(
                "give either model_config or an inline [model] table, not both".into(),
            ));
        }
        if self.checkpoints.windows(2).any(|w| w[0] >= w[1]) || self.checkpoints.first() == Some(&0)
        {
            return Err(CormError::InvalidConfig(
                "checkpoints must be positive and strictly ascending".into(),
            ));
        }
        let mut files: Vec<&Path> = Vec::new();
        files.extend(self.model_config.as_deref());
        files.extend(self.weights.as_deref());
        if let Some(InputSource::File { path }) = &self.input {
            files.push(path);
        }
        for f in files {
            let p = self.resolve(f);
            if !p.is_file() {
                return Err(CormError::InvalidConfig(format!(
                    "referenced file {} does not exist",
                    p.display()
                )));
            }
        }
        if let Some(InputSource::Synthetic { length, seeds }) = &self.input {
            if *length == 0 || seeds.is_empty() {
                return Err(CormError::InvalidConfig(
                    "synthetic input needs a length and at least one seed".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn model_config_resolved(&self) -> Result<ModelConfig> {
        match (&self.model, &self.model_config) {
            (Some(c), _) => Ok(c.clone()),
            (None, Some(path)) => ModelConfig::load(&self.resolve(path)),
            (None, None) => Ok(ModelConfig::toy(0)),
        }
    }

    pub fn build_model(&self) -> Result<Model> {
        let config = self.model_config_resolved()?;
        match &self.weights {
            Some(path) => {
                let weights = Weights::load(&config, &self.resolve(path))?;
                Model::from_weights(config, weights)
            }
            None => Model::init(config),
        }
    }

    /// Input texts as token-id sequences.
    pub fn load_inputs(&self, vocab_size: usize) -> Result<Vec<Vec<u32>>> {
        match &self.input {
            None => Err(CormError::InvalidConfig("no input given".into())),
            Some(InputSource::Synthetic { length, seeds }) => Ok(seeds
                .iter()
                .map(|&s| text::synthetic_tokens(s, *length, vocab_size))
                .collect()),
            Some(InputSource::File { path }) => {
                let p = self.resolve(path);
                let raw = std::fs::read_to_string(&p).map_err(|e| CormError::io(&p, e))?;
                let tokens =
                    text::parse_token_ids(&raw).unwrap_or_else(|_| text::encode_bytes(&raw));
                if tokens.is_empty() {
                    return Err(CormError::EmptySequence);
                }
                Ok(vec![tokens])
            }
        }
    }
}
