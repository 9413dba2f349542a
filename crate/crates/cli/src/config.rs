//! Pipeline configuration: one TOML file, every field defaulted, flags on
//! top.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use granary::corpus::DecomposeConfig;
use granary::dataset::DEFAULT_MAX_LEN;
use granary::distiller::{DistillConfig, HttpBackendConfig};
use granary::tinylm::ModelConfig;
use granary::trainer::{TrainConfig, TrainMode};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Directory of cleaned Markdown books.
    pub corpus_dir: PathBuf,
    /// JSON manifest mapping file name to {doc_id, title, learning_stage};
    /// relative paths resolve against `corpus_dir`.
    pub manifest: PathBuf,
    /// Where every artifact is written.
    pub workdir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            corpus_dir: PathBuf::from("corpus"),
            manifest: PathBuf::from("manifest.json"),
            workdir: PathBuf::from("work"),
        }
    }
}

impl PathsConfig {
    pub fn manifest_path(&self) -> PathBuf {
        if self.manifest.is_absolute() {
            self.manifest.clone()
        } else {
            self.corpus_dir.join(&self.manifest)
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    /// Use the offline deterministic mock instead of the HTTP backend.
    pub mock: bool,
    pub mock_seed: u64,
    /// Every n-th answer call of the mock omits its `<answer>` span.
    pub mock_missing_answer_every: Option<u64>,
    pub http: HttpBackendConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub max_len: usize,
    /// General : domain sample ratio for mixing.
    pub mix_ratio: f64,
    pub seed: u64,
    pub system_prompt: String,
    /// Optional general-domain chat set in the `sft_dataset.jsonl` schema.
    pub general_path: Option<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            max_len: DEFAULT_MAX_LEN,
            mix_ratio: 1.0,
            seed: 0,
            system_prompt: String::new(),
            general_path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub quiz: PathBuf,
    pub max_new_tokens: usize,
    pub parallelism: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            quiz: PathBuf::from("quiz.jsonl"),
            max_new_tokens: 64,
            parallelism: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub coords: usize,
    pub step: f64,
    pub tolerance: f64,
    pub seq_len: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            coords: 200,
            step: granary::tinylm::gradcheck::DEFAULT_STEP,
            tolerance: granary::tinylm::gradcheck::DEFAULT_TOLERANCE,
            seq_len: 48,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: PathsConfig,
    pub decompose: DecomposeConfig,
    pub distill: DistillConfig,
    pub backend: BackendConfig,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub gradcheck: GradcheckConfig,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub mock_llm: bool,
    pub parallelism: Option<usize>,
    pub lambda: Option<f64>,
    pub mode: Option<TrainMode>,
    pub max_len: Option<usize>,
    pub workdir: Option<PathBuf>,
}

impl PipelineConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(PipelineConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Validation(format!("config {}: {e}", path.display())))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.model.seed = seed;
            self.train.seed = seed;
            self.dataset.seed = seed;
            self.backend.mock_seed = seed;
        }
        if o.mock_llm {
            self.backend.mock = true;
        }
        if let Some(p) = o.parallelism {
            self.distill.parallelism = p;
            self.eval.parallelism = p;
        }
        if let Some(l) = o.lambda {
            self.train.lambda = l;
        }
        if let Some(m) = o.mode {
            self.train.mode = m;
        }
        if let Some(n) = o.max_len {
            self.dataset.max_len = n;
        }
        if let Some(w) = &o.workdir {
            self.paths.workdir = w.clone();
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let v = |e: &dyn std::fmt::Display| CliError::Validation(e.to_string());
        self.distill.validate().map_err(|e| v(&e))?;
        self.model.validate().map_err(|e| v(&e))?;
        self.train.validate().map_err(|e| v(&e))?;
        if self.dataset.max_len < 8 {
            return Err(CliError::Validation(format!("dataset.max_len must be >= 8, got {}", self.dataset.max_len)));
        }
        if !(self.dataset.mix_ratio.is_finite() && self.dataset.mix_ratio > 0.0) {
            return Err(CliError::Validation(format!(
                "dataset.mix_ratio must be > 0, got {}",
                self.dataset.mix_ratio
            )));
        }
        if self.decompose.min_node_tokens == 0 {
            return Err(CliError::Validation("decompose.min_node_tokens must be >= 1".into()));
        }
        if self.eval.parallelism == 0 {
            return Err(CliError::Validation("eval.parallelism must be >= 1".into()));
        }
        if self.gradcheck.coords == 0 || !(self.gradcheck.step.is_finite() && self.gradcheck.step > 0.0) || self.gradcheck.seq_len < 2 {
            return Err(CliError::Validation(
                "gradcheck needs coords >= 1, step > 0 and seq_len >= 2".into(),
            ));
        }
        Ok(())
    }
}
