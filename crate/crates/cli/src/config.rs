//! Exit classification and run-config files.

use std::path::Path;

use anyhow::Context;
use serde::de::DeserializeOwned;
use serde::Serialize;

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_PIPELINE: u8 = 3;

pub const RUN_CONFIG_FILE: &str = "run_config.toml";

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

pub type Outcome = Result<(), Failure>;

pub fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        error: e.into(),
    }
}

pub fn data(e: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: EXIT_DATA,
        error: e.into(),
    }
}

pub fn pipeline(e: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: EXIT_PIPELINE,
        error: e.into(),
    }
}

/// Loads `path` as the base option set, or defaults when absent.
pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, Failure> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))
        .map_err(usage)?;
    toml::from_str(&text)
        .with_context(|| format!("config {}", path.display()))
        .map_err(usage)
}

/// Writes the resolved options next to a run's outputs.
pub fn write_resolved<T: Serialize>(dir: &Path, cfg: &T) -> Outcome {
    let text = toml::to_string_pretty(cfg).context("serializing run config").map_err(pipeline)?;
    let path = dir.join(RUN_CONFIG_FILE);
    std::fs::write(&path, text)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(data)
}

pub fn create_dir(dir: &Path) -> Outcome {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .map_err(data)
}

pub fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Outcome {
    std::fs::write(path, bytes)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(data)
}
