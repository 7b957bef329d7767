//! The run configuration document.

use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};
use stable_bc::envs::EnvConfig;
use stable_bc::eval::Protocol;
use stable_bc::trainer::TrainConfig;

use crate::Failure;

/// Demonstration settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExpertSection {
    pub demos: usize,
    pub seed: u64,
}

impl Default for ExpertSection {
    fn default() -> Self {
        Self { demos: 15, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub protocol: Protocol,
    pub episodes: usize,
    pub seed: u64,
    /// Action noise standard deviation for the `action_noise` protocol.
    pub noise: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            protocol: Protocol::Matched,
            episodes: 50,
            seed: 1000,
            noise: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyzeSection {
    /// Bound on the environment-state error.
    pub eps: f64,
    /// End time of the bound curve in seconds.
    pub horizon: f64,
    /// Number of points on the bound curve.
    pub points: usize,
}

impl Default for AnalyzeSection {
    fn default() -> Self {
        Self {
            eps: 0.1,
            horizon: 2.0,
            points: 21,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub env: EnvConfig,
    pub expert: ExpertSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub analyze: AnalyzeSection,
}

impl RunConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self, Failure> {
        toml::from_str(text).map_err(|e| Failure::Usage(anyhow::anyhow!("{origin}: {e}")))
    }

    /// Reads a config file, or the defaults when no path is given.
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("cannot read config {}", p.display()))
                    .map_err(Failure::Usage)?;
                Self::parse(&text, &p.display().to_string())
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configs always serialize")
    }

    /// Writes the resolved config as `config.toml` in `dir`.
    pub fn echo(&self, dir: &Path) -> anyhow::Result<()> {
        let path = dir.join("config.toml");
        std::fs::write(&path, self.to_toml()).with_context(|| format!("cannot write {}", path.display()))
    }
}
