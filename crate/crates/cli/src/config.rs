//! Study configuration file (TOML).
//!
//! ```toml
//! seed = 2024
//! manifest = "manifest.csv"
//! schedule = "out/schedule.json"
//! rules = "rules.csv"
//! events = "out/events.jsonl"
//! listen = "127.0.0.1:8080"
//!
//! [predictor]
//! mode = "subprocess"
//! command = ["python3", "deepseenet_wrapper.py"]
//! timeout_seconds = 20
//!
//! [simulation]
//! clinicians = 24
//! ```
//!
//! Relative paths resolve against the directory holding the config file.

use std::path::{Path, PathBuf};

use reader_bench::predictor::PredictorBinding;
use reader_bench::severity::{load_rule_table, SeverityRuleTable};
use reader_bench::simulation::SimulationConfig;
use serde::Deserialize;

use crate::error::{read_file, CliError, CliResult};

pub const DEFAULT_LISTEN: &str = "127.0.0.1:8080";

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub seed: Option<u64>,
    pub manifest: Option<PathBuf>,
    pub schedule: Option<PathBuf>,
    pub rules: Option<PathBuf>,
    pub events: Option<PathBuf>,
    pub listen: Option<String>,
    pub predictor: PredictorBinding,
    pub simulation: SimulationConfig,
}

/// A parsed config plus the text it came from.
#[derive(Debug, Clone, Default)]
pub struct LoadedConfig {
    pub config: StudyConfig,
    /// Empty when no file was given.
    pub text: String,
}

impl LoadedConfig {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(LoadedConfig::default());
        };
        let text = read_file(path)?;
        let mut config = parse(&text).map_err(|message| CliError::Config {
            path: path.to_path_buf(),
            message,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut config.manifest,
            &mut config.schedule,
            &mut config.rules,
            &mut config.events,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let PredictorBinding::Fixture { path: Some(p) } = &mut config.predictor {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(LoadedConfig { config, text })
    }

    /// `--seed` wins over the file's top-level seed, which wins over `[simulation] seed`.
    pub fn seed(&self, flag: Option<u64>) -> u64 {
        flag.or(self.config.seed).unwrap_or(self.config.simulation.seed)
    }

    pub fn simulation(&self, seed: u64) -> SimulationConfig {
        SimulationConfig {
            seed,
            ..self.config.simulation.clone()
        }
    }

    pub fn rules(&self, flag: Option<&Path>) -> CliResult<SeverityRuleTable> {
        match flag.or(self.config.rules.as_deref()) {
            Some(p) => Ok(load_rule_table(p)?),
            None => Ok(SeverityRuleTable::default()),
        }
    }
}

pub fn parse(text: &str) -> Result<StudyConfig, String> {
    let config: StudyConfig = toml::from_str(text).map_err(|e| e.message().to_string())?;
    config.predictor.validate().map_err(|e| e.to_string())?;
    config.simulation.validate().map_err(|e| e.to_string())?;
    Ok(config)
}
