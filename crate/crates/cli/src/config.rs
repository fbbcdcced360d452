//! Settings file. Values here sit between built-in defaults and the
//! `AMK_*` environment variables / command-line flags.

use std::path::{Path, PathBuf};

use amk_core::prompt::LlmConfig;
use amk_core::toy::ToyModelSpec;
use anyhow::{Context, Result};
use serde::Deserialize;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub backend: Option<String>,
    pub cache_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    #[serde(default)]
    pub toy: Option<ToyModelSpec>,
    #[serde(default)]
    pub edit: EditDefaults,
    #[serde(default)]
    pub sar: SarDefaults,
    pub llm: Option<LlmConfig>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditDefaults {
    pub steps: Option<usize>,
    pub g: Option<f32>,
    pub preset: Option<String>,
    pub subject: Option<String>,
    pub source_age: Option<f32>,
    pub refine: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SarDefaults {
    pub age_low: Option<f32>,
    pub age_high: Option<f32>,
    pub cluster_size: Option<usize>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<FileConfig> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}
