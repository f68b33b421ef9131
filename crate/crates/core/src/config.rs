//! Top-level run configuration read by the command-line tool.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::PhantomSpec;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub cases: usize,
    pub base_seed: u64,
    /// Number of trailing cases held out for evaluation in ablation runs.
    pub held_out: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            cases: 3,
            base_seed: 0,
            held_out: 1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub phantom: PhantomSpec,
    pub train: TrainConfig,
    pub dataset: DatasetConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    /// Parses and validates a JSON document. Unknown keys are rejected.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Parameter(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Parameter(msg) => Error::Parameter(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.train.validate()?;
        self.train
            .adjacency
            .validate_for(crate::synth::NUM_CLASSES)?;
        if self.dataset.cases == 0 {
            return Err(Error::param("dataset.cases must be positive"));
        }
        if self.dataset.held_out >= self.dataset.cases {
            return Err(Error::param(format!(
                "dataset.held_out ({}) must be smaller than dataset.cases ({})",
                self.dataset.held_out, self.dataset.cases
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_default() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn round_trip() {
        let mut cfg = RunConfig::default();
        cfg.train.total_steps = 17;
        cfg.dataset.cases = 5;
        let back = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        for doc in [
            r#"{"bogus": 1}"#,
            r#"{"train": {"steps": 5}}"#,
            r#"{"phantom": {"size": 5}}"#,
            r#"{"train": {"registration": {"kind": "demons", "iters": 2}}}"#,
        ] {
            assert!(
                matches!(RunConfig::from_json(doc), Err(Error::Parameter(_))),
                "{doc}"
            );
        }
    }

    #[test]
    fn registration_fragment_parses() {
        let cfg = RunConfig::from_json(
            r#"{"train": {"registration": {"kind": "seeded-conv", "seed": 4}}}"#,
        )
        .unwrap();
        assert_eq!(
            cfg.train.registration,
            crate::registration::RegistrationConfig::SeededConv { seed: 4 }
        );
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::from_json(r#"{"train": {"total_steps": 0}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"dataset": {"cases": 2, "held_out": 2}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"phantom": {"dims": [4, 4, 4]}}"#).is_err());
    }
}
