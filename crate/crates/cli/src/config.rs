use std::path::Path;

use anyhow::{bail, Context};
use flowbev::metrics::DetectionConfig;
use flowbev::pipeline::AlignConfig;
use flowbev::sim::ScenarioConfig;
use serde::{Deserialize, Serialize};

/// Settings that may come from a TOML file. Command-line flags override the
/// matching fields after loading.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub scenario: ScenarioConfig,
    pub align: AlignConfig,
    pub detection: DetectionConfig,
    pub bench: BenchConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub points: usize,
    pub sweeps: usize,
    pub repetitions: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            points: 100_000,
            sweeps: 10,
            repetitions: 10,
            warmup: 2,
            seed: 0,
        }
    }
}

impl FileConfig {
    /// Parses a TOML file; unknown keys anywhere are rejected by name.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let mut unknown = Vec::new();
        let de = toml::Deserializer::new(text);
        let cfg: FileConfig = serde_ignored::deserialize(de, |p| unknown.push(p.to_string()))?;
        if !unknown.is_empty() {
            bail!("unknown config keys: {}", unknown.join(", "));
        }
        Ok(cfg)
    }
}
