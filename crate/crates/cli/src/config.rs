//! Node configuration file.
//!
//! ```toml
//! transport = "sockets"
//! f = 1
//! view_timeout_ms = 2000
//! state_dir = "state"
//! owners = ["<owner public key, hex>"]
//!
//! [[nodes]]
//! public_key = "<hex>"
//! endpoint = "127.0.0.1:7100"
//! key_file = "node-0.key"
//! ```
//!
//! Nodes are listed in index order, which is ascending public-key order.
//! Relative paths resolve against the directory holding the file. Timeouts
//! can be overridden per process through the `QUORATE_*_MS` variables in
//! [`Timeouts::from_env`].

use std::path::{Path, PathBuf};
use std::time::Duration;

use quorate_core::crypto::PublicKey;
use quorate_core::domain::{ClusterConfig, NodeIndex};
use serde::{Deserialize, Serialize};

use crate::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transport {
    /// Whole cluster in one process over the simulated network.
    Sim,
    /// One process per node over TCP.
    Sockets,
}

fn default_transport() -> Transport {
    Transport::Sockets
}
fn default_view_timeout() -> u64 {
    2000
}
fn default_exec_batch() -> u32 {
    4
}
fn default_agree_batch() -> u32 {
    25
}
fn default_pipeline() -> u32 {
    2
}
fn default_checkpoint() -> u32 {
    16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeEntry {
    pub public_key: String,
    pub endpoint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key_file: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default = "default_transport")]
    pub transport: Transport,
    pub f: u32,
    #[serde(default = "default_view_timeout")]
    pub view_timeout_ms: u64,
    #[serde(default = "default_exec_batch")]
    pub exec_batch_max: u32,
    #[serde(default = "default_agree_batch")]
    pub agree_batch_max: u32,
    #[serde(default = "default_pipeline")]
    pub agree_pipeline: u32,
    #[serde(default = "default_checkpoint")]
    pub checkpoint_interval: u32,
    /// Keys allowed to submit group updates; empty allows any signer.
    #[serde(default)]
    pub owners: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_dir: Option<PathBuf>,
    pub nodes: Vec<NodeEntry>,
}

fn parse_key(hex: &str, what: &str) -> Result<PublicKey> {
    PublicKey::from_hex(hex).ok_or_else(|| CliError::Config(format!("{what}: bad public key {hex:?}")))
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("config file: {e}")))
    }

    pub fn to_text(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Builds and validates the cluster configuration.
    pub fn cluster(&self) -> Result<ClusterConfig> {
        let members = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| Ok((parse_key(&n.public_key, &format!("node {i}"))?, n.endpoint.clone())))
            .collect::<Result<Vec<_>>>()?;
        let mut cluster = ClusterConfig::new(members.clone(), self.f, Duration::from_millis(self.view_timeout_ms))
            .map_err(|e| CliError::Config(e.to_string()))?;
        for (i, (key, _)) in members.iter().enumerate() {
            if cluster.key(i as NodeIndex) != Some(key) {
                return Err(CliError::Config(
                    "nodes must be listed in ascending public-key order".into(),
                ));
            }
        }
        cluster.exec_batch_max = self.exec_batch_max;
        cluster.agree_batch_max = self.agree_batch_max;
        cluster.agree_pipeline = self.agree_pipeline;
        cluster.checkpoint_interval = self.checkpoint_interval;
        cluster.owners = self
            .owners
            .iter()
            .map(|o| parse_key(o, "owner"))
            .collect::<Result<_>>()?;
        cluster.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cluster)
    }
}

/// A parsed config file and where it was read from.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub file: ConfigFile,
    pub dir: PathBuf,
    pub cluster: ClusterConfig,
}

impl LoadedConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path.display(), e))?;
        let file = ConfigFile::parse(&text)?;
        let cluster = file.cluster()?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { file, dir, cluster })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.dir.join(p)
        }
    }

    pub fn key_file(&self, index: NodeIndex) -> Option<PathBuf> {
        let entry = self.file.nodes.get(index as usize)?;
        Some(self.resolve(entry.key_file.as_deref()?))
    }

    pub fn state_dir(&self) -> PathBuf {
        self.resolve(self.file.state_dir.as_deref().unwrap_or(Path::new("state")))
    }
}

/// Local timer settings. Each can be overridden by an environment variable
/// holding milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Timeouts {
    /// `QUORATE_VIEW_TIMEOUT_MS`
    pub view_timeout: Duration,
    /// `QUORATE_COLLECT_GRACE_MS`, default a quarter of the view timeout.
    pub collect_grace: Duration,
    /// `QUORATE_FLUSH_INTERVAL_MS`, default 5.
    pub flush_interval: Duration,
    /// `QUORATE_CLIENT_RETRY_MS`, default four view timeouts.
    pub client_retry: Duration,
    /// `QUORATE_CONNECT_TIMEOUT_MS`, default 1000.
    pub connect: Duration,
}

fn env_ms(name: &str) -> Result<Option<Duration>> {
    match std::env::var(name) {
        Ok(v) => v
            .trim()
            .parse::<u64>()
            .map(|ms| Some(Duration::from_millis(ms)))
            .map_err(|_| CliError::Config(format!("{name}={v:?} is not a whole number of milliseconds"))),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(CliError::Config(format!("{name}: {e}"))),
    }
}

impl Timeouts {
    pub fn from_env(view_timeout: Duration) -> Result<Self> {
        let view_timeout = env_ms("QUORATE_VIEW_TIMEOUT_MS")?.unwrap_or(view_timeout);
        if view_timeout.is_zero() {
            return Err(CliError::Config("view timeout must be positive".into()));
        }
        Ok(Self {
            view_timeout,
            collect_grace: env_ms("QUORATE_COLLECT_GRACE_MS")?.unwrap_or(view_timeout / 4),
            flush_interval: env_ms("QUORATE_FLUSH_INTERVAL_MS")?.unwrap_or(Duration::from_millis(5)),
            client_retry: env_ms("QUORATE_CLIENT_RETRY_MS")?.unwrap_or(view_timeout * 4),
            connect: env_ms("QUORATE_CONNECT_TIMEOUT_MS")?.unwrap_or(Duration::from_secs(1)),
        })
    }
}
