//! One experiment described in a JSON file.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bandwidth::{ChannelConfig, ChannelSpec};
use crate::tracegen::TransformerGenConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    Ideal,
    OnDemand,
    LayerGranularity,
    LifetimeAware,
}

impl Policy {
    pub const ALL: [Policy; 4] = [
        Policy::Ideal,
        Policy::OnDemand,
        Policy::LayerGranularity,
        Policy::LifetimeAware,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Policy::Ideal => "ideal",
            Policy::OnDemand => "on-demand",
            Policy::LayerGranularity => "layer-granularity",
            Policy::LifetimeAware => "lifetime-aware",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Policy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Policy::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown policy {s:?}"))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputPaths {
    #[serde(default)]
    pub plan: Option<PathBuf>,
    #[serde(default)]
    pub report: Option<PathBuf>,
    #[serde(default)]
    pub timeline: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub trace: Option<PathBuf>,
    #[serde(default)]
    pub generator: Option<TransformerGenConfig>,
    pub capacity_bytes: u64,
    pub channels: Vec<ChannelSpec>,
    #[serde(default)]
    pub host_cap_bytes: Option<u64>,
    #[serde(default)]
    pub policy: Option<Policy>,
    #[serde(default)]
    pub outputs: OutputPaths,
}

#[derive(Debug, Error, PartialEq)]
pub enum ScenarioError {
    #[error("a scenario needs exactly one of `trace` and `generator`")]
    TraceSource,
    #[error("capacity must be positive")]
    ZeroCapacity,
    #[error("{0}")]
    Channels(String),
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<ChannelConfig, ScenarioError> {
        if self.trace.is_some() == self.generator.is_some() {
            return Err(ScenarioError::TraceSource);
        }
        if self.capacity_bytes == 0 {
            return Err(ScenarioError::ZeroCapacity);
        }
        let channels =
            ChannelConfig::from_specs(&self.channels).map_err(ScenarioError::Channels)?;
        channels
            .validate()
            .map_err(|e| ScenarioError::Channels(e.to_string()))?;
        Ok(channels)
    }
}
