//! Pipeline configuration file.
//!
//! A JSON object; every key is optional and falls back to the default shown
//! by `PipelineConfig::default()`. Relative paths in `files` resolve against
//! `data_dir`, relative paths in `outputs` against `out_dir`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::answer_model::{AnswerModelConfig, AnswerTrainConfig, RelationMode};
use crate::encoders::TextEncoderConfig;
use crate::error::{Error, Result};
use crate::relation_model::RelationTrainConfig;
use crate::retrieval::RetrievalConfig;

use super::synthetic::SyntheticSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataFiles {
    pub facts: PathBuf,
    pub qa: PathBuf,
    /// Training subset; when absent every sample in `qa` is used.
    pub train: Option<PathBuf>,
    /// Evaluation subset; when absent every sample in `qa` is used.
    pub test: Option<PathBuf>,
    pub embeddings: PathBuf,
    pub concepts: PathBuf,
    /// One stopword per line; the built-in list when absent.
    pub stopwords: Option<PathBuf>,
}

impl Default for DataFiles {
    fn default() -> Self {
        Self {
            facts: "facts.jsonl".into(),
            qa: "qa.jsonl".into(),
            train: Some("train.jsonl".into()),
            test: Some("test.jsonl".into()),
            embeddings: "embeddings.txt".into(),
            concepts: "concepts.txt".into(),
            stopwords: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputFiles {
    pub relation_checkpoint: PathBuf,
    pub answer_checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub relation_losses: PathBuf,
    pub answer_losses: PathBuf,
}

impl Default for OutputFiles {
    fn default() -> Self {
        Self {
            relation_checkpoint: "relation.ckpt".into(),
            answer_checkpoint: "answer.ckpt".into(),
            metrics: "metrics.json".into(),
            relation_losses: "relation_losses.json".into(),
            answer_losses: "answer_losses.json".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Exit with a numeric failure at or above this relative error.
    pub threshold: f64,
    /// Coordinates sampled per parameter tensor.
    pub coords_per_group: usize,
    /// Nodes in the probe graph.
    pub nodes: usize,
    /// Narrow layers keep the check fast; the structure is unchanged.
    pub gcn_width: usize,
    pub text_hidden: usize,
    pub mlp_hidden: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            threshold: 1e-4,
            coords_per_group: 24,
            nodes: 5,
            gcn_width: 16,
            text_hidden: 8,
            mlp_hidden: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub files: DataFiles,
    pub outputs: OutputFiles,
    pub retrieval: RetrievalConfig,
    pub relation_mode: RelationMode,
    pub relation_model: TextEncoderConfig,
    pub relation_train: RelationTrainConfig,
    pub answer_model: AnswerModelConfig,
    pub answer_train: AnswerTrainConfig,
    pub synthetic: SyntheticSpec,
    pub gradcheck: GradCheckConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            data_dir: "data".into(),
            out_dir: "out".into(),
            files: DataFiles::default(),
            outputs: OutputFiles::default(),
            retrieval: RetrievalConfig::default(),
            relation_mode: RelationMode::default(),
            relation_model: TextEncoderConfig::default(),
            relation_train: RelationTrainConfig::default(),
            answer_model: AnswerModelConfig::default(),
            answer_train: AnswerTrainConfig::default(),
            synthetic: SyntheticSpec::default(),
            gradcheck: GradCheckConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn data_path(&self, file: &Path) -> PathBuf {
        self.data_dir.join(file)
    }

    pub fn out_path(&self, file: &Path) -> PathBuf {
        self.out_dir.join(file)
    }
}
