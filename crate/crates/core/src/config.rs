//! Crawl configuration and the per-market metadata dossier.
//!
//! Both documents are JSON. [`load_market_metadata`] reads the dossier that
//! drives login, manual cookies and the list of starting links;
//! [`validate_config`] fills defaults and refuses configurations that could
//! never terminate.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use indexmap::IndexMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::frontier::{normalize_url, CanonicalUrl};

/// Seed used for cookie and user-agent rotation when none is given.
pub const DEFAULT_SEED: u64 = 42;
/// Successful requests served by one cookie before rotating to the next.
pub const DEFAULT_ROTATE_EVERY: u32 = 25;

/// Ten common desktop browser strings used when no list is configured.
pub const DEFAULT_USER_AGENTS: [&str; 10] = [
    "Mozilla/5.0 (Windows NT 10.0; Win64; x64) AppleWebKit/537.36 (KHTML, like Gecko) Chrome/124.0.0.0 Safari/537.36",
    "Mozilla/5.0 (Windows NT 10.0; Win64; x64; rv:125.0) Gecko/20100101 Firefox/125.0",
    "Mozilla/5.0 (Macintosh; Intel Mac OS X 10_15_7) AppleWebKit/605.1.15 (KHTML, like Gecko) Version/17.4 Safari/605.1.15",
    "Mozilla/5.0 (Macintosh; Intel Mac OS X 10_15_7) AppleWebKit/537.36 (KHTML, like Gecko) Chrome/124.0.0.0 Safari/537.36",
    "Mozilla/5.0 (X11; Linux x86_64) AppleWebKit/537.36 (KHTML, like Gecko) Chrome/124.0.0.0 Safari/537.36",
    "Mozilla/5.0 (X11; Linux x86_64; rv:125.0) Gecko/20100101 Firefox/125.0",
    "Mozilla/5.0 (Windows NT 10.0; Win64; x64) AppleWebKit/537.36 (KHTML, like Gecko) Chrome/124.0.0.0 Safari/537.36 Edg/124.0.2478.51",
    "Mozilla/5.0 (Macintosh; Intel Mac OS X 14.4; rv:125.0) Gecko/20100101 Firefox/125.0",
    "Mozilla/5.0 (Windows NT 10.0; rv:115.0) Gecko/20100101 Firefox/115.0",
    "Mozilla/5.0 (X11; Ubuntu; Linux x86_64; rv:124.0) Gecko/20100101 Firefox/124.0",
];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed document: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("{field}: {message}")]
    InvalidField { field: &'static str, message: String },
    #[error("non-terminating configuration: set at least one of max_depth, max_links, time_limit or target_links")]
    NonTerminating,
}

impl ConfigError {
    pub(crate) fn field(field: &'static str, message: impl Into<String>) -> Self {
        Self::InvalidField {
            field,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CookieSource {
    #[default]
    Manual,
    Login,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CookieSpec {
    pub name: String,
    pub value: String,
    pub domain: String,
    #[serde(default = "root_path")]
    pub path: String,
    #[serde(default)]
    pub source: CookieSource,
}

fn root_path() -> String {
    "/".to_string()
}

impl CookieSpec {
    pub fn new(name: impl Into<String>, value: impl Into<String>, domain: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            value: value.into(),
            domain: domain.into(),
            path: root_path(),
            source: CookieSource::Manual,
        }
    }

    pub fn with_source(mut self, source: CookieSource) -> Self {
        self.source = source;
        self
    }

    /// `name=value` as it appears in a `Cookie` header.
    pub fn pair(&self) -> String {
        format!("{}={}", self.name, self.value)
    }

    pub fn check(&self) -> Result<(), ConfigError> {
        if self.name.is_empty() {
            return Err(ConfigError::field("cookies", "cookie name must be non-empty"));
        }
        if self.domain.is_empty() {
            return Err(ConfigError::field(
                "cookies",
                format!("cookie {:?} has an empty domain", self.name),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Credentials {
    pub username: String,
    pub password: String,
    pub login_path: String,
    pub username_field: String,
    pub password_field: String,
    /// Additional form inputs, submitted after the two credential fields in
    /// document order.
    #[serde(default)]
    pub extra_fields: IndexMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarketMetadata {
    pub market_name: String,
    pub starting_links: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub credentials: Option<Credentials>,
    #[serde(default)]
    pub cookies: Vec<CookieSpec>,
    #[serde(default)]
    pub captcha_hints: Vec<String>,
    #[serde(default)]
    pub expected_home_marker: String,
}

const METADATA_KEYS: [&str; 6] = [
    "market_name",
    "starting_links",
    "credentials",
    "cookies",
    "captcha_hints",
    "expected_home_marker",
];

impl MarketMetadata {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.starting_links.is_empty() {
            return Err(ConfigError::field(
                "starting_links",
                "starting_links must be non-empty",
            ));
        }
        if let Some(creds) = &self.credentials {
            if creds.login_path.trim().is_empty() {
                return Err(ConfigError::field("credentials", "login_path must be non-empty"));
            }
            if !(creds.login_path.starts_with('/') || creds.login_path.contains("://")) {
                return Err(ConfigError::field(
                    "credentials",
                    format!("login_path {:?} is neither an absolute path nor a URL", creds.login_path),
                ));
            }
            if creds.username_field.is_empty() || creds.password_field.is_empty() {
                return Err(ConfigError::field(
                    "credentials",
                    "username_field and password_field must be non-empty",
                ));
            }
        }
        for cookie in &self.cookies {
            cookie.check()?;
        }
        Ok(())
    }

    /// Path component of the configured login page, if any.
    pub fn login_path(&self) -> Option<&str> {
        let raw = self.credentials.as_ref()?.login_path.as_str();
        Some(match raw.find("://") {
            Some(idx) => {
                let rest = &raw[idx + 3..];
                rest.find('/').map(|slash| &rest[slash..]).unwrap_or("/")
            }
            None => raw,
        })
    }
}

/// Parse a market metadata document. Unknown top-level keys are logged and
/// ignored.
pub fn parse_market_metadata(text: &str) -> Result<MarketMetadata, ConfigError> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    if let Some(map) = value.as_object() {
        for key in map.keys().filter(|k| !METADATA_KEYS.contains(&k.as_str())) {
            tracing::warn!(key = %key, "ignoring unknown market metadata field");
        }
    }
    let meta: MarketMetadata = serde_json::from_value(value)?;
    meta.validate()?;
    Ok(meta)
}

pub fn load_market_metadata(path: impl AsRef<Path>) -> Result<MarketMetadata, ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_market_metadata(&text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProxyProtocol {
    /// SOCKS5 with name resolution on the proxy side.
    Socks5h,
    Http,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProxySpec {
    pub protocol: ProxyProtocol,
    pub host: String,
    pub port: u16,
}

impl fmt::Display for ProxySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let scheme = match self.protocol {
            ProxyProtocol::Socks5h => "socks5h",
            ProxyProtocol::Http => "http",
        };
        write!(f, "{scheme}://{}:{}", self.host, self.port)
    }
}

impl FromStr for ProxySpec {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = |msg: &str| ConfigError::field("proxy", format!("{s:?}: {msg}"));
        let (scheme, rest) = s.split_once("://").ok_or_else(|| bad("expected scheme://host:port"))?;
        let protocol = match scheme.to_ascii_lowercase().as_str() {
            "socks5h" => ProxyProtocol::Socks5h,
            "http" => ProxyProtocol::Http,
            "socks5" => return Err(bad("socks5 resolves names locally; use socks5h")),
            _ => return Err(bad("unsupported proxy scheme")),
        };
        let rest = rest.trim_end_matches('/');
        let (host, port) = rest.rsplit_once(':').ok_or_else(|| bad("missing port"))?;
        if host.is_empty() {
            return Err(bad("missing host"));
        }
        let port = port.parse::<u16>().map_err(|_| bad("invalid port"))?;
        Ok(Self {
            protocol,
            host: host.to_string(),
            port,
        })
    }
}

impl Serialize for ProxySpec {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ProxySpec {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        raw.parse().map_err(serde::de::Error::custom)
    }
}

mod secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let v = f64::deserialize(d)?;
        Duration::try_from_secs_f64(v).map_err(serde::de::Error::custom)
    }

    pub mod opt {
        use super::*;

        pub fn serialize<S: Serializer>(d: &Option<Duration>, s: S) -> Result<S::Ok, S::Error> {
            match d {
                Some(d) => s.serialize_some(&d.as_secs_f64()),
                None => s.serialize_none(),
            }
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Duration>, D::Error> {
            Option::<f64>::deserialize(d)?
                .map(|v| Duration::try_from_secs_f64(v).map_err(serde::de::Error::custom))
                .transpose()
        }
    }
}

/// User-facing crawl settings. Durations are written in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrawlConfig {
    pub max_depth: Option<u32>,
    pub max_links: Option<u64>,
    #[serde(with = "secs::opt", rename = "time_limit_secs")]
    pub time_limit: Option<Duration>,
    /// Raw target URLs for the "all targets downloaded" stop criterion.
    pub target_links: Option<Vec<String>>,
    pub proxy: Option<ProxySpec>,
    pub user_agents: Vec<String>,
    #[serde(with = "secs", rename = "request_timeout_secs")]
    pub request_timeout: Duration,
    pub retries: u32,
    /// Base of the exponential retry backoff (`base * 2^attempt`).
    #[serde(with = "secs", rename = "retry_backoff_secs")]
    pub retry_backoff: Duration,
    #[serde(with = "secs", rename = "politeness_delay_secs")]
    pub politeness_delay: Duration,
    pub rng_seed: u64,
    pub output_dir: PathBuf,
    pub workers: usize,
    pub rotate_every: u32,
    #[serde(with = "secs", rename = "captcha_timeout_secs")]
    pub captcha_timeout: Duration,
}

impl Default for CrawlConfig {
    fn default() -> Self {
        Self {
            max_depth: None,
            max_links: None,
            time_limit: None,
            target_links: None,
            proxy: None,
            user_agents: Vec::new(),
            request_timeout: Duration::from_secs(30),
            retries: 2,
            retry_backoff: Duration::from_millis(250),
            politeness_delay: Duration::from_millis(500),
            rng_seed: DEFAULT_SEED,
            output_dir: PathBuf::from("crawl-output"),
            workers: 1,
            rotate_every: DEFAULT_ROTATE_EVERY,
            captcha_timeout: Duration::from_secs(600),
        }
    }
}

impl CrawlConfig {
    pub fn from_json_str(text: &str) -> Result<Self, ConfigError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json_str(&text)
    }
}

/// A configuration that passed [`validate_config`]. Immutable from here on.
#[derive(Debug, Clone)]
pub struct ValidatedConfig {
    cfg: CrawlConfig,
    targets: Option<BTreeSet<CanonicalUrl>>,
}

impl ValidatedConfig {
    pub fn targets(&self) -> Option<&BTreeSet<CanonicalUrl>> {
        self.targets.as_ref()
    }

    pub fn into_inner(self) -> CrawlConfig {
        self.cfg
    }
}

impl std::ops::Deref for ValidatedConfig {
    type Target = CrawlConfig;

    fn deref(&self) -> &CrawlConfig {
        &self.cfg
    }
}

pub fn validate_config(mut cfg: CrawlConfig) -> Result<ValidatedConfig, ConfigError> {
    if cfg.workers == 0 {
        return Err(ConfigError::field("workers", "workers must be ≥ 1"));
    }
    if cfg.max_links == Some(0) {
        return Err(ConfigError::field("max_links", "max_links must be positive"));
    }
    if cfg.rotate_every == 0 {
        return Err(ConfigError::field("rotate_every", "rotate_every must be positive"));
    }
    if cfg.user_agents.is_empty() {
        cfg.user_agents = DEFAULT_USER_AGENTS.iter().map(|s| s.to_string()).collect();
    }
    if cfg.user_agents.iter().any(|ua| ua.trim().is_empty()) {
        return Err(ConfigError::field("user_agents", "user agent strings must be non-empty"));
    }

    let targets = match &cfg.target_links {
        None => None,
        Some(raw) if raw.is_empty() => {
            return Err(ConfigError::field("target_links", "target_links must be non-empty when set"));
        }
        Some(raw) => Some(
            raw.iter()
                .map(|link| {
                    normalize_url(link, None)
                        .map_err(|e| ConfigError::field("target_links", format!("{link:?}: {e}")))
                })
                .collect::<Result<BTreeSet<_>, _>>()?,
        ),
    };

    let bounded = cfg.max_depth.is_some()
        || cfg.max_links.is_some()
        || cfg.time_limit.is_some()
        || targets.is_some();
    if !bounded {
        return Err(ConfigError::NonTerminating);
    }
    Ok(ValidatedConfig { cfg, targets })
}
