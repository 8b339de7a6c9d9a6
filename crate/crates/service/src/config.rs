//! Service configuration: one TOML file plus `KALCHAS_*` environment
//! overrides.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_UPLOAD_LIMIT: usize = 100 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid value for {field}: {message}")]
    Field { field: String, message: String },
}

/// Settings for background fine-tune jobs. Request bodies may override the
/// training fields per job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Manifest whose entries are appended to the exported labels.
    pub extra_manifest: Option<PathBuf>,
}

impl Default for FinetuneSettings {
    fn default() -> Self {
        FinetuneSettings {
            epochs: 20,
            batch_size: 8,
            learning_rate: 1e-4,
            seed: 0,
            extra_manifest: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub host: String,
    pub port: u16,
    pub store_dir: PathBuf,
    pub registry_dir: PathBuf,
    pub default_model: String,
    /// Bearer token required on mutating endpoints; `None` leaves them open.
    pub token: Option<String>,
    pub upload_limit_bytes: usize,
    pub finetune: FinetuneSettings,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            host: "127.0.0.1".into(),
            port: 8080,
            store_dir: PathBuf::from("store"),
            registry_dir: PathBuf::from("models"),
            default_model: "Kalchas".into(),
            token: None,
            upload_limit_bytes: DEFAULT_UPLOAD_LIMIT,
            finetune: FinetuneSettings::default(),
        }
    }
}

fn field_err(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Field {
        field: field.to_string(),
        message: message.into(),
    }
}

impl ServiceConfig {
    /// Parses TOML text. Unknown keys and ill-typed values are rejected with
    /// the offending field named.
    pub fn from_toml(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let cfg: ServiceConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`, then applies overrides from the process environment.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_toml(&text, path)?;
        cfg.apply_env(&std::env::vars().collect())?;
        Ok(cfg)
    }

    /// Applies `KALCHAS_HOST`, `KALCHAS_PORT`, `KALCHAS_STORE_DIR`,
    /// `KALCHAS_REGISTRY_DIR`, `KALCHAS_DEFAULT_MODEL`, `KALCHAS_TOKEN` and
    /// `KALCHAS_UPLOAD_LIMIT` from `vars`.
    pub fn apply_env(&mut self, vars: &HashMap<String, String>) -> Result<(), ConfigError> {
        let get = |k: &str| vars.get(k).map(String::as_str);
        if let Some(v) = get("KALCHAS_HOST") {
            self.host = v.to_string();
        }
        if let Some(v) = get("KALCHAS_PORT") {
            self.port = v
                .parse()
                .map_err(|_| field_err("KALCHAS_PORT", format!("{v:?} is not a port number")))?;
        }
        if let Some(v) = get("KALCHAS_STORE_DIR") {
            self.store_dir = PathBuf::from(v);
        }
        if let Some(v) = get("KALCHAS_REGISTRY_DIR") {
            self.registry_dir = PathBuf::from(v);
        }
        if let Some(v) = get("KALCHAS_DEFAULT_MODEL") {
            self.default_model = v.to_string();
        }
        if let Some(v) = get("KALCHAS_TOKEN") {
            self.token = Some(v.to_string()).filter(|t| !t.is_empty());
        }
        if let Some(v) = get("KALCHAS_UPLOAD_LIMIT") {
            self.upload_limit_bytes = v
                .parse()
                .map_err(|_| field_err("KALCHAS_UPLOAD_LIMIT", format!("{v:?} is not a byte count")))?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.upload_limit_bytes == 0 {
            return Err(field_err("upload_limit_bytes", "must be positive"));
        }
        if self.default_model.is_empty() {
            return Err(field_err("default_model", "must not be empty"));
        }
        if self.token.as_deref() == Some("") {
            return Err(field_err("token", "must not be empty; omit it to disable auth"));
        }
        if self.finetune.batch_size == 0 {
            return Err(field_err("finetune.batch_size", "must be at least 1"));
        }
        if !(self.finetune.learning_rate > 0.0) {
            return Err(field_err("finetune.learning_rate", "must be positive"));
        }
        Ok(())
    }

    pub fn socket_addr(&self) -> Result<SocketAddr, ConfigError> {
        format!("{}:{}", self.host, self.port)
            .parse()
            .map_err(|_| field_err("host", format!("{:?} is not an IP address", self.host)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_missing_fields() {
        let cfg = ServiceConfig::from_toml("port = 9000\n[finetune]\nepochs = 3\n", Path::new("c.toml")).unwrap();
        assert_eq!(cfg.port, 9000);
        assert_eq!(cfg.finetune.epochs, 3);
        assert_eq!(cfg.upload_limit_bytes, DEFAULT_UPLOAD_LIMIT);
        assert_eq!(cfg.default_model, "Kalchas");
    }

    #[test]
    fn unknown_and_mistyped_fields_are_named() {
        let err = ServiceConfig::from_toml("prot = 1\n", Path::new("c.toml")).unwrap_err();
        assert!(err.to_string().contains("prot"), "{err}");
        let err = ServiceConfig::from_toml("port = \"x\"\n", Path::new("c.toml")).unwrap_err();
        assert!(err.to_string().contains("port"), "{err}");
        let err = ServiceConfig::from_toml("upload_limit_bytes = 0\n", Path::new("c.toml")).unwrap_err();
        assert!(err.to_string().contains("upload_limit_bytes"), "{err}");
    }

    #[test]
    fn environment_overrides() {
        let mut cfg = ServiceConfig::default();
        let vars: HashMap<String, String> = [
            ("KALCHAS_PORT", "7001"),
            ("KALCHAS_TOKEN", "secret"),
            ("KALCHAS_DEFAULT_MODEL", "Other"),
            ("KALCHAS_UPLOAD_LIMIT", "1024"),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
        cfg.apply_env(&vars).unwrap();
        assert_eq!((cfg.port, cfg.token.as_deref(), cfg.default_model.as_str()), (7001, Some("secret"), "Other"));
        assert_eq!(cfg.upload_limit_bytes, 1024);
        let bad: HashMap<String, String> = [("KALCHAS_PORT".to_string(), "huge".to_string())].into();
        assert!(cfg.apply_env(&bad).unwrap_err().to_string().contains("KALCHAS_PORT"));
    }
}
