//! Run configuration loaded from TOML.
//!
//! Every table is optional and falls back to defaults; unknown keys are
//! rejected. The effective configuration is echoed into output headers.
//!
//! ```toml
//! seed = 7
//! motion_mode = "gru"
//!
//! [simulate]
//! frames = 40
//! layout = "crossing"
//!
//! [tracker]
//! model = "ctra"
//! stage1_threshold = 0.3
//!
//! [train]
//! mode = "semi"
//! epochs = 3
//!
//! [eval]
//! recall_levels = 10
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::EvalConfig;
use crate::simulator::SimConfig;
use crate::tracker::{MotionMode, TrackerConfig};
use crate::trainer::TrainConfig;

/// Default file locations; command-line flags take precedence.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub scenarios: Vec<PathBuf>,
    pub validation: Vec<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub motion_mode: MotionMode,
    pub simulate: SimConfig,
    pub tracker: TrackerConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.simulate.validate()?;
        self.tracker.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let field = e.message().split('`').nth(1).unwrap_or("config").to_string();
            Error::config(field, e.to_string().replace('\n', " ").trim().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Effective configuration as JSON, for output headers.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::ModelKind;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_toml_str("").unwrap(), RunConfig::default());
    }

    #[test]
    fn nested_values() {
        let cfg = RunConfig::from_toml_str(
            "seed = 3\nmotion_mode = \"gru\"\n[tracker]\nmodel = \"bicycle\"\nstage1_threshold = 0.4\n[train.gain]\nhidden_cap = 16\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.motion_mode, MotionMode::Gru);
        assert_eq!(cfg.tracker.model, ModelKind::Bicycle);
        assert_eq!(cfg.tracker.stage1_threshold, 0.4);
        assert_eq!(cfg.train.gain.hidden_cap, 16);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::from_toml_str("[tracker]\nstage_one = 0.3\n").unwrap_err();
        match err {
            Error::Config { field, .. } => assert_eq!(field, "stage_one"),
            e => panic!("{e:?}"),
        }
        assert!(RunConfig::from_toml_str("colour = 1\n").is_err());
    }

    #[test]
    fn values_validated() {
        assert!(matches!(
            RunConfig::from_toml_str("[tracker]\nscore_threshold = 1.5\n"),
            Err(Error::Config { .. })
        ));
        assert!(matches!(
            RunConfig::from_toml_str("[train]\nmax_lr = -1.0\n"),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn echo_round_trips() {
        let cfg = RunConfig::from_toml_str("seed = 11\n[eval]\nrecall_levels = 20\n").unwrap();
        let back: RunConfig = serde_json::from_value(cfg.echo()).unwrap();
        assert_eq!(back, cfg);
    }
}
