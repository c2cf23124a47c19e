use std::path::Path;

use mtvif::datakit::SynthConfig;
use mtvif::mthnet::ModelConfig;
use mtvif::trainloop::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Everything a run depends on besides its input paths. Written next to the
/// outputs of every command as `resolved_config.toml`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub synth: SynthConfig,
}

pub const RESOLVED_NAME: &str = "resolved_config.toml";

impl RunConfig {
    /// Base values from a named profile, then overridden key by key by the
    /// optional TOML file.
    pub fn load(profile: &str, file: Option<&Path>) -> Result<Self, CliError> {
        let train = TrainConfig::profile(profile)
            .ok_or_else(|| CliError::Usage(format!("unknown profile `{profile}` (expected desk or paper)")))?;
        let base = RunConfig { train, ..Default::default() };
        let Some(file) = file else { return Ok(base) };
        let text = std::fs::read_to_string(file)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", file.display())))?;
        let overlay: toml::Table =
            toml::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", file.display())))?;
        let mut merged = toml::Table::try_from(&base).map_err(|e| CliError::Runtime(e.to_string()))?;
        merge(&mut merged, overlay);
        toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Usage(format!("config {}: {e}", file.display())))
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Runtime(format!("serializing config: {e}")))
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<(), CliError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(RESOLVED_NAME), self.to_toml()?)?;
        Ok(())
    }
}

fn merge(into: &mut toml::Table, from: toml::Table) {
    for (k, v) in from {
        match (into.get_mut(&k), v) {
            (Some(toml::Value::Table(a)), toml::Value::Table(b)) => merge(a, b),
            (_, v) => {
                into.insert(k, v);
            }
        }
    }
}
