use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use redlab::tasks::SyntheticTask;
use redlab::train::TrainConfig;
use redlab::{PeftSpec, TransformerConfig};

use crate::CliError;

/// One experiment: everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: TransformerConfig,
    pub peft: PeftSpec,
    pub train: TrainConfig,
    pub task: SyntheticTask,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("invalid config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks every section and their mutual consistency.
    pub fn validate(&self) -> Result<(), CliError> {
        let cfg = |e: redlab::Error| CliError::Config(e.to_string());
        self.model.validate().map_err(cfg)?;
        self.peft.validate().map_err(cfg)?;
        self.train.validate().map_err(cfg)?;
        self.task.validate().map_err(cfg)?;
        let (m, t) = (&self.model, &self.task);
        if t.vocab_size != m.vocab_size {
            return Err(CliError::Config(format!(
                "task.vocab_size {} differs from model.vocab_size {}",
                t.vocab_size, m.vocab_size
            )));
        }
        if t.n_classes != m.n_classes {
            return Err(CliError::Config(format!(
                "task.n_classes {} differs from model.n_classes {}",
                t.n_classes, m.n_classes
            )));
        }
        if t.seq_len > m.max_seq_len {
            return Err(CliError::Config(format!(
                "task.seq_len {} exceeds model.max_seq_len {}",
                t.seq_len, m.max_seq_len
            )));
        }
        Ok(())
    }

    /// The directory outputs go to: `--out` wins over the config field.
    pub fn out_dir(&self, flag: Option<&Path>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| self.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from("runs/default"))
    }
}
