//! Run configuration: one TOML file, every field optional, flags override.

use std::path::Path;

use serde::{Deserialize, Serialize};
use voxret_core::curation::{FilterThresholds, GenderMarkers, KeywordSet};
use voxret_core::model::ModelConfig;
use voxret_core::training::TrainConfig;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum StretchGroup {
    All,
    /// Segments with speaking rate above the manifest median.
    Fast,
    /// Segments with speaking rate below the manifest median.
    Slow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StretchConfig {
    pub rate: f64,
    pub group: StretchGroup,
}

impl Default for StretchConfig {
    fn default() -> Self {
        Self {
            rate: 1.5,
            group: StretchGroup::Fast,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train: 0.8,
            valid: 0.1,
            test: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HistogramConfig {
    pub mos_bin_width: f64,
    pub mlm_bin_width: f64,
}

impl Default for HistogramConfig {
    fn default() -> Self {
        Self {
            mos_bin_width: 0.1,
            mlm_bin_width: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub thresholds: FilterThresholds,
    pub keywords: KeywordSet,
    pub gender_markers: GenderMarkers,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub stretch: StretchConfig,
    pub histograms: HistogramConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text =
            std::fs::read_to_string(path).map_err(|e| CliError::from(e).context(path.display()))?;
        toml::from_str(&text).map_err(|e| CliError::from(e).context(path.display()))
    }
}
