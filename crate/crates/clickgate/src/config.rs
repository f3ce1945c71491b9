//! Proxy configuration: JSON file, environment overrides, validation.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clickgate_core::PolicyKind;
use serde::{Deserialize, Serialize};

pub const ENV_LISTEN: &str = "CLICKGATE_LISTEN";
pub const ENV_CONTROL: &str = "CLICKGATE_CONTROL";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProxyConfig {
    pub listen_address: SocketAddr,
    pub control_address: SocketAddr,
    pub policy: PolicyKind,
    /// Public suffix list in the standard text format. The bundled list is
    /// used when unset.
    pub suffix_list_path: Option<PathBuf>,
    pub whitelist_path: Option<PathBuf>,
    pub jar_persistence_path: Option<PathBuf>,
    pub drop_new_third_party_cookies: bool,
    pub tls_intercept: bool,
    pub ca_cert_path: Option<PathBuf>,
    pub ca_key_path: Option<PathBuf>,
    /// Routes connections for a host to a fixed address instead of resolving
    /// it. Used to point the proxy at local origins.
    pub upstream_overrides: BTreeMap<String, SocketAddr>,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        Self {
            listen_address: SocketAddr::from(([127, 0, 0, 1], 8080)),
            control_address: SocketAddr::from(([127, 0, 0, 1], 8081)),
            policy: PolicyKind::InteractionBased,
            suffix_list_path: None,
            whitelist_path: None,
            jar_persistence_path: None,
            drop_new_third_party_cookies: false,
            tls_intercept: false,
            ca_cert_path: None,
            ca_key_path: None,
            upstream_overrides: BTreeMap::new(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("malformed config {}: {source}", path.display())]
    Format { path: PathBuf, source: serde_json::Error },
    #[error("{var}: invalid socket address {value:?}")]
    Env { var: &'static str, value: String },
    #[error("listen and control addresses are both {0}")]
    SameAddress(SocketAddr),
    #[error("tls_intercept needs ca_cert_path and ca_key_path")]
    MissingCa,
}

impl ProxyConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        serde_json::from_str(&text).map_err(|source| ConfigError::Format { path: path.to_path_buf(), source })
    }

    /// Applies `CLICKGATE_LISTEN` and `CLICKGATE_CONTROL` via `lookup`.
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        for (var, slot) in [(ENV_LISTEN, &mut self.listen_address), (ENV_CONTROL, &mut self.control_address)] {
            if let Some(value) = lookup(var) {
                *slot = value.trim().parse().map_err(|_| ConfigError::Env { var, value })?;
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.listen_address == self.control_address && self.listen_address.port() != 0 {
            return Err(ConfigError::SameAddress(self.listen_address));
        }
        if self.tls_intercept && (self.ca_cert_path.is_none() || self.ca_key_path.is_none()) {
            return Err(ConfigError::MissingCa);
        }
        Ok(())
    }
}
