//! Manager configuration: a flat `key = value` file.
//!
//! ```text
//! backend = simulated
//! billing_time_unit_ms = 60000
//! max_hosts = 8
//! policy = threshold:0.8,0.2
//! listen_callback = 127.0.0.1:0
//! ```
//!
//! Blank lines and lines starting with `#` are ignored.

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use thiserror::Error;

use crate::backend::{DEFAULT_LOCAL_BTU_MS, DEFAULT_SIM_BTU_MS, DEFAULT_STARTUP_DELAY_MS};
use crate::policy::DEFAULT_DEADLINE;

pub const CONFIG_ENV: &str = "ELASTIKIT_CONFIG";

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected 'key = value'")]
    Syntax { line: usize },
    #[error("unknown key '{0}'")]
    UnknownKey(String),
    #[error("bad value for '{key}': {value}")]
    BadValue { key: String, value: String },
    #[error("cannot read {path}: {reason}")]
    Io { path: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendKind {
    Local,
    Simulated,
}

impl FromStr for BackendKind {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "local" => Ok(Self::Local),
            "simulated" => Ok(Self::Simulated),
            _ => Err(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManagerConfig {
    pub backend: BackendKind,
    pub billing_time_unit_ms: u64,
    pub max_hosts: usize,
    pub policy: String,
    pub listen_callback: String,
    pub startup_delay_ms: u64,
    pub utilization_window_ms: u64,
    pub policy_deadline: Duration,
    pub hostd_path: Option<PathBuf>,
    pub host_size: String,
}

impl ManagerConfig {
    pub fn simulated() -> Self {
        Self {
            backend: BackendKind::Simulated,
            billing_time_unit_ms: DEFAULT_SIM_BTU_MS,
            max_hosts: 8,
            policy: "single".into(),
            listen_callback: "127.0.0.1:0".into(),
            startup_delay_ms: DEFAULT_STARTUP_DELAY_MS,
            utilization_window_ms: 10_000,
            policy_deadline: DEFAULT_DEADLINE,
            hostd_path: None,
            host_size: "small".into(),
        }
    }

    pub fn local() -> Self {
        Self {
            backend: BackendKind::Local,
            billing_time_unit_ms: DEFAULT_LOCAL_BTU_MS,
            ..Self::simulated()
        }
    }

    pub fn with_policy(mut self, policy: &str) -> Self {
        self.policy = policy.to_string();
        self
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        // The backend decides the defaults, so read it first.
        let mut cfg = match pairs.iter().find(|(k, _)| k == "backend") {
            Some((_, v)) => match v.parse() {
                Ok(BackendKind::Local) => Self::local(),
                Ok(BackendKind::Simulated) => Self::simulated(),
                Err(()) => return Err(bad("backend", v)),
            },
            None => Self::local(),
        };
        for (k, v) in pairs {
            match k.as_str() {
                "backend" => {}
                "billing_time_unit_ms" => cfg.billing_time_unit_ms = num(&k, &v)?,
                "max_hosts" => cfg.max_hosts = num(&k, &v)?,
                "startup_delay_ms" => cfg.startup_delay_ms = num(&k, &v)?,
                "utilization_window_ms" => cfg.utilization_window_ms = num(&k, &v)?,
                "policy_deadline_ms" => cfg.policy_deadline = Duration::from_millis(num(&k, &v)?),
                "policy" => cfg.policy = v,
                "listen_callback" => cfg.listen_callback = v,
                "hostd_path" => cfg.hostd_path = Some(PathBuf::from(v)),
                "host_size" => cfg.host_size = v,
                _ => return Err(ConfigError::UnknownKey(k)),
            }
        }
        if cfg.billing_time_unit_ms == 0 {
            return Err(bad("billing_time_unit_ms", "0"));
        }
        if cfg.max_hosts == 0 {
            return Err(bad("max_hosts", "0"));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::parse(&text)
    }

    /// Loads `path` if given, else the file named by `ELASTIKIT_CONFIG`,
    /// else the local-backend defaults.
    pub fn resolve(path: Option<&Path>) -> Result<Self, ConfigError> {
        match path {
            Some(p) => Self::load(p),
            None => match std::env::var_os(CONFIG_ENV) {
                Some(p) => Self::load(Path::new(&p)),
                None => Ok(Self::local()),
            },
        }
    }
}

fn bad(key: &str, value: &str) -> ConfigError {
    ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
    }
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| bad(key, value))
}
