//! Service configuration. Precedence: command-line flags, then
//! environment variables (clap reads both into [`ServeOverrides`]), then
//! the TOML config file, then built-in defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogFormat {
    #[default]
    Text,
    Json,
}

impl std::str::FromStr for LogFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "text" => Ok(LogFormat::Text),
            "json" => Ok(LogFormat::Json),
            _ => Err(format!("unknown log format {s:?} (expected text or json)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServeConfig {
    pub bind: String,
    pub registry: PathBuf,
    /// Linear fits on at most this many rows complete within the request.
    pub sync_max_rows: usize,
    /// Upper bound on `k` for sample and Monte Carlo requests.
    pub max_samples: usize,
    pub log_format: LogFormat,
}

impl Default for ServeConfig {
    fn default() -> Self {
        ServeConfig {
            bind: "127.0.0.1:8080".into(),
            registry: PathBuf::from("models"),
            sync_max_rows: 5000,
            max_samples: 1_000_000,
            log_format: LogFormat::Text,
        }
    }
}

/// Partial configuration: one layer of the precedence chain.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServeOverrides {
    pub bind: Option<String>,
    pub registry: Option<PathBuf>,
    pub sync_max_rows: Option<usize>,
    pub max_samples: Option<usize>,
    pub log_format: Option<LogFormat>,
}

impl ServeOverrides {
    pub fn load(path: &Path) -> Result<Self, qrgmm::Error> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| qrgmm::Error::Config(format!("{}: {e}", path.display())))
    }
}

impl ServeConfig {
    /// Resolves `layers` in priority order (highest first) over the defaults.
    pub fn resolve(layers: &[ServeOverrides]) -> Self {
        let d = ServeConfig::default();
        fn pick<T: Clone>(
            layers: &[ServeOverrides],
            f: impl Fn(&ServeOverrides) -> Option<T>,
        ) -> Option<T> {
            layers.iter().find_map(f)
        }
        ServeConfig {
            bind: pick(layers, |l| l.bind.clone()).unwrap_or(d.bind),
            registry: pick(layers, |l| l.registry.clone()).unwrap_or(d.registry),
            sync_max_rows: pick(layers, |l| l.sync_max_rows).unwrap_or(d.sync_max_rows),
            max_samples: pick(layers, |l| l.max_samples).unwrap_or(d.max_samples),
            log_format: pick(layers, |l| l.log_format).unwrap_or(d.log_format),
        }
    }
}
