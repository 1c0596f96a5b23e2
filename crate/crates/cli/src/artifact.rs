use std::path::Path;

use cfam_core::{CfamFit, MainEffectFit};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const SCHEMA_VERSION: u32 = 1;

/// Fitted model plus everything needed to score new subjects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub schema_version: u32,
    pub tool_version: String,
    pub fit: CfamFit<f64>,
    /// Original arm labels in arm order.
    pub arm_labels: Vec<String>,
    /// Per-arm means removed from the outcome before fitting.
    pub arm_means: Vec<f64>,
    pub functional_names: Vec<String>,
    pub scalar_names: Vec<String>,
    pub n_train: usize,
    pub main_effect: Option<MainEffectFit<f64>>,
    /// Index of the chosen penalty on the CV path, when CV was run.
    pub cv_chosen: Option<usize>,
    pub config: RunConfig,
}

#[derive(Deserialize)]
struct VersionProbe {
    schema_version: u32,
}

impl ModelArtifact {
    pub fn to_json(&self) -> CliResult<String> {
        serde_json::to_string_pretty(self).map_err(|e| CliError::Numerical(format!("cannot serialize model: {e}")))
    }

    pub fn from_json(text: &str) -> CliResult<Self> {
        let probe: VersionProbe =
            serde_json::from_str(text).map_err(|e| CliError::Data(format!("not a model artifact: {e}")))?;
        if probe.schema_version > SCHEMA_VERSION {
            return Err(CliError::Data(format!(
                "model artifact has schema version {}, newer than the supported {SCHEMA_VERSION}",
                probe.schema_version
            )));
        }
        serde_json::from_str(text).map_err(|e| CliError::Data(format!("corrupt model artifact: {e}")))
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}
