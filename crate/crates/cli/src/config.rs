use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use topicgrowth::diagnostics::DiversityForm;
use topicgrowth::inference::SeKind;
use topicgrowth::matching::MatchConfig;
use topicgrowth::synth::GenSpec;

use crate::error::CliError;

/// Input files. Relative paths resolve against the working directory; unset
/// panel paths default to the output directory (where `synth` writes).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputConfig {
    pub trajectories: Option<PathBuf>,
    pub events: Option<PathBuf>,
    pub entrant_history: Option<PathBuf>,
    pub funding: Option<PathBuf>,
    pub edges: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Measures to report; empty means every measure in the panel.
    pub measures: Vec<String>,
    pub did_se: SeKind,
    pub cv_folds: usize,
    pub diversity_form: DiversityForm,
    pub jaccard_draws: usize,
    /// Event time of the per-topic sign tests and the diversity regression.
    pub horizon: i32,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            measures: Vec::new(),
            did_se: SeKind::Classical,
            cv_folds: 10,
            diversity_form: DiversityForm::Ratio,
            jaccard_draws: 100,
            horizon: 10,
        }
    }
}

/// Everything a run depends on. Loaded from TOML, then overridden by flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Worker threads; 0 lets the runtime choose.
    pub threads: usize,
    pub input: InputConfig,
    pub matching: MatchConfig,
    pub analysis: AnalysisConfig,
    /// Generator spec for `synth` and synthetic `pipeline` runs.
    pub synth: Option<GenSpec>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("out"),
            threads: 0,
            input: InputConfig::default(),
            matching: MatchConfig::default(),
            analysis: AnalysisConfig::default(),
            synth: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Input(format!("config {}: {e}", path.display())))
    }

    /// Applies the global seed to every seeded component.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.matching.seed = seed;
        self
    }

    pub fn trajectories_path(&self) -> PathBuf {
        self.input
            .trajectories
            .clone()
            .unwrap_or_else(|| self.out.join("trajectories.csv"))
    }

    pub fn events_path(&self) -> PathBuf {
        self.input.events.clone().unwrap_or_else(|| self.out.join("events.csv"))
    }

    /// SHA-256 of the canonical JSON form, excluding the thread count and
    /// output directory, which never change results.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.threads = 0;
        canonical.out = PathBuf::new();
        let bytes = serde_json::to_vec(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}
