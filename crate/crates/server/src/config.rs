//! TOML configuration with environment overrides.
//!
//! Every scalar can be overridden by an environment variable named after its
//! path: `EDGEPOSE_` followed by the keys joined with `__`, for example
//! `EDGEPOSE_BIND`, `EDGEPOSE_NOISE__SIGMA_PX` or
//! `EDGEPOSE_PROXIES__0__MAX_IN_FLIGHT`. Values are read as TOML literals
//! when they parse as one and as plain strings otherwise.

use std::collections::HashSet;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use edgepose_core::detector::OracleNoiseModel;
use edgepose_core::geometry::CameraIntrinsics;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use toml::{Table, Value};

use crate::proxy::ProxySpec;

pub const ENV_PREFIX: &str = "EDGEPOSE_";
pub const DEFAULT_BIND: &str = "127.0.0.1:8080";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("environment override {var}: {message}")]
    Env { var: String, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub sigma_px: f64,
    pub dropout_p: f64,
    pub distance_noise_gain: f64,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        let n = OracleNoiseModel::exact();
        Self {
            sigma_px: n.sigma_px,
            dropout_p: n.dropout_p,
            distance_noise_gain: n.distance_noise_gain,
            seed: n.seed,
        }
    }
}

impl From<NoiseConfig> for OracleNoiseModel {
    fn from(c: NoiseConfig) -> Self {
        OracleNoiseModel {
            sigma_px: c.sigma_px,
            dropout_p: c.dropout_p,
            distance_noise_gain: c.distance_noise_gain,
            seed: c.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default = "default_bind")]
    pub bind: String,
    /// Object model JSON; a 0.3 m cube when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
    /// Default intrinsics for proxies and synthesis; VGA when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intrinsics: Option<CameraIntrinsics>,
    #[serde(default)]
    pub noise: NoiseConfig,
    /// Datasets preloaded into the oracle's annotation store.
    #[serde(default)]
    pub datasets: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    /// Static files (the annotation UI) served at `/`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub static_dir: Option<PathBuf>,
    /// JSON pose `T_Robot_Map`; enables `ar_to_map` in responses.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub robot_map_pose: Option<PathBuf>,
    #[serde(default)]
    pub proxies: Vec<ProxySpec>,
}

fn default_bind() -> String {
    DEFAULT_BIND.to_string()
}

impl Default for Config {
    fn default() -> Self {
        Self {
            bind: default_bind(),
            model: None,
            intrinsics: None,
            noise: NoiseConfig::default(),
            datasets: Vec::new(),
            out_dir: None,
            static_dir: None,
            robot_map_pose: None,
            proxies: Vec::new(),
        }
    }
}

impl Config {
    /// Load `path` (if any), apply `EDGEPOSE_*` entries from `env`, validate.
    pub fn load(
        path: Option<&Path>,
        env: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self, ConfigError> {
        let (text, origin) = match path {
            Some(p) => (
                std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
                    path: p.to_path_buf(),
                    source,
                })?,
                p.to_path_buf(),
            ),
            None => (String::new(), PathBuf::from("<defaults>")),
        };
        // parse once directly so errors carry line and column
        let base: Config = toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: origin.clone(),
            message: e.to_string(),
        })?;

        let overrides: Vec<(String, String)> = env
            .into_iter()
            .filter(|(k, _)| k.starts_with(ENV_PREFIX) && k != "EDGEPOSE_CONFIG")
            .collect();
        let cfg = if overrides.is_empty() {
            base
        } else {
            let mut table: Table = toml::from_str(&text).map_err(|e| ConfigError::Parse {
                path: origin,
                message: e.to_string(),
            })?;
            for (var, value) in &overrides {
                apply_override(&mut table, var, value)?;
            }
            let names: Vec<&str> = overrides.iter().map(|(k, _)| k.as_str()).collect();
            Value::Table(table).try_into().map_err(|e: toml::de::Error| ConfigError::Env {
                var: names.join(", "),
                message: e.message().to_string(),
            })?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.bind_addr()?;
        let mut seen = HashSet::new();
        for p in &self.proxies {
            if !seen.insert(p.name.as_str()) {
                return Err(ConfigError::Invalid(format!("duplicate proxy name `{}`", p.name)));
            }
            if p.max_in_flight == 0 {
                return Err(ConfigError::Invalid(format!("proxy `{}`: max_in_flight must be >= 1", p.name)));
            }
            if let Some(n) = &p.noise {
                n.validate()
                    .map_err(|e| ConfigError::Invalid(format!("proxy `{}` noise: {e}", p.name)))?;
            }
        }
        self.noise_model()
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("noise: {e}")))?;
        Ok(())
    }

    pub fn bind_addr(&self) -> Result<SocketAddr, ConfigError> {
        self.bind
            .parse()
            .map_err(|e| ConfigError::Invalid(format!("bind `{}`: {e}", self.bind)))
    }

    pub fn noise_model(&self) -> OracleNoiseModel {
        self.noise.into()
    }

    pub fn intrinsics_or_default(&self) -> CameraIntrinsics {
        self.intrinsics.unwrap_or_else(CameraIntrinsics::vga)
    }
}

fn parse_scalar(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn apply_override(table: &mut Table, var: &str, raw: &str) -> Result<(), ConfigError> {
    let err = |message: String| ConfigError::Env {
        var: var.to_string(),
        message,
    };
    let path: Vec<String> = var[ENV_PREFIX.len()..]
        .split("__")
        .map(|s| s.to_ascii_lowercase())
        .collect();
    if path.iter().any(|s| s.is_empty()) {
        return Err(err("empty key segment".into()));
    }
    let value = parse_scalar(raw);

    let mut slot: &mut Value = table
        .entry(path[0].clone())
        .or_insert_with(|| Value::Table(Table::new()));
    if path.len() == 1 {
        *slot = value;
        return Ok(());
    }
    for (depth, key) in path.iter().enumerate().skip(1) {
        let last = depth == path.len() - 1;
        slot = match slot {
            Value::Table(t) => {
                let entry = t
                    .entry(key.clone())
                    .or_insert_with(|| Value::Table(Table::new()));
                if last {
                    *entry = value;
                    return Ok(());
                }
                entry
            }
            Value::Array(items) => {
                let idx: usize = key
                    .parse()
                    .map_err(|_| err(format!("`{key}` is not an index into `{}`", path[depth - 1])))?;
                let len = items.len();
                let entry = items
                    .get_mut(idx)
                    .ok_or_else(|| err(format!("index {idx} out of range ({len} entries)")))?;
                if last {
                    *entry = value;
                    return Ok(());
                }
                entry
            }
            _ => return Err(err(format!("`{}` is not a table", path[depth - 1]))),
        };
    }
    Ok(())
}
