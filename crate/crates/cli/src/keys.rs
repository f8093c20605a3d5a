//! Key files and cluster bootstrap.
//!
//! A key file is two TOML lines: `secret` (the 32-byte seed) and `public`,
//! both hex. The public key is rederived on load and must match.

use std::path::{Path, PathBuf};
use std::time::Duration;

use quorate_core::client::SignedDiscovery;
use quorate_core::crypto::{KeyPair, PublicKey};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::config::{ConfigFile, NodeEntry, Transport};
use crate::{CliError, Result};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct KeyFile {
    secret: String,
    public: String,
}

pub fn key_text(key: &KeyPair) -> String {
    toml::to_string(&KeyFile {
        secret: hex::encode(key.seed()),
        public: key.public_key().to_hex(),
    })
    .expect("key file serializes")
}

pub fn read_key(path: &Path) -> Result<KeyPair> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path.display(), e))?;
    let bad = |why: &str| CliError::Config(format!("{}: {why}", path.display()));
    let file: KeyFile = toml::from_str(&text).map_err(|e| bad(&e.to_string()))?;
    let seed: [u8; 32] = hex::decode(&file.secret)
        .ok()
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| bad("secret is not 32 hex bytes"))?;
    let key = KeyPair::from_seed(seed);
    if key.public_key().to_hex() != file.public {
        return Err(bad("public key does not match the secret"));
    }
    Ok(key)
}

/// Reads a public key from a key file or from a file holding just the hex.
pub fn read_public(path: &Path) -> Result<PublicKey> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path.display(), e))?;
    if let Some(k) = PublicKey::from_hex(text.trim()) {
        return Ok(k);
    }
    Ok(read_key(path)?.public_key().clone())
}

pub fn random_key() -> KeyPair {
    let mut seed = [0u8; 32];
    rand::rngs::OsRng.fill_bytes(&mut seed);
    KeyPair::from_seed(seed)
}

#[derive(Debug, Clone)]
pub struct GenKeysOptions {
    pub n: usize,
    pub f: Option<u32>,
    pub out_dir: PathBuf,
    /// Endpoint per index; defaults to `host:base_port + i`.
    pub endpoints: Vec<String>,
    pub host: String,
    pub base_port: u16,
    pub view_timeout: Duration,
    pub force: bool,
}

pub const CONFIG_FILE: &str = "cluster.toml";
pub const DISCOVERY_FILE: &str = "discovery.txt";
pub const DISCOVERY_KEY: &str = "discovery.key";
pub const DISCOVERY_PUB: &str = "discovery.pub";
pub const OWNER_KEY: &str = "owner.key";

pub fn node_key_name(i: usize) -> String {
    format!("node-{i}.key")
}

/// What [`gen_keys`] wrote.
#[derive(Debug, Clone)]
pub struct Generated {
    pub files: Vec<PathBuf>,
    pub config: ConfigFile,
}

/// Writes `n` node keys (named by index), an owner key, the discovery key
/// pair, a node config file and the discovery file signed by the discovery
/// key. Refuses to overwrite anything unless `force` is set.
pub fn gen_keys(opts: &GenKeysOptions) -> Result<Generated> {
    let f = opts.f.unwrap_or(opts.n.saturating_sub(1) as u32 / 3);
    if opts.n < 3 * f as usize + 1 || opts.n == 0 {
        return Err(CliError::Config(format!("n = {} is below 3f + 1 for f = {f}", opts.n)));
    }
    if !opts.endpoints.is_empty() && opts.endpoints.len() != opts.n {
        return Err(CliError::Config(format!(
            "{} endpoints given for {} nodes",
            opts.endpoints.len(),
            opts.n
        )));
    }
    let mut names: Vec<String> = (0..opts.n).map(node_key_name).collect();
    names.extend([CONFIG_FILE, DISCOVERY_FILE, DISCOVERY_KEY, DISCOVERY_PUB, OWNER_KEY].map(String::from));
    let paths: Vec<PathBuf> = names.iter().map(|n| opts.out_dir.join(n)).collect();
    if !opts.force {
        let existing: Vec<String> = paths
            .iter()
            .filter(|p| p.exists())
            .map(|p| p.display().to_string())
            .collect();
        if !existing.is_empty() {
            return Err(CliError::Exists(format!(
                "refusing to overwrite {} (use --force)",
                existing.join(", ")
            )));
        }
    }
    std::fs::create_dir_all(&opts.out_dir).map_err(|e| CliError::io(opts.out_dir.display(), e))?;

    let mut nodes: Vec<KeyPair> = (0..opts.n).map(|_| random_key()).collect();
    nodes.sort_by(|a, b| a.public_key().cmp(b.public_key()));
    let owner = random_key();
    let discovery = random_key();
    let config = ConfigFile {
        transport: Transport::Sockets,
        f,
        view_timeout_ms: opts.view_timeout.as_millis() as u64,
        exec_batch_max: 4,
        agree_batch_max: 25,
        agree_pipeline: 2,
        checkpoint_interval: 16,
        owners: vec![owner.public_key().to_hex()],
        state_dir: Some("state".into()),
        nodes: nodes
            .iter()
            .enumerate()
            .map(|(i, k)| NodeEntry {
                public_key: k.public_key().to_hex(),
                endpoint: opts
                    .endpoints
                    .get(i)
                    .cloned()
                    .unwrap_or_else(|| format!("{}:{}", opts.host, u32::from(opts.base_port) + i as u32)),
                key_file: Some(node_key_name(i).into()),
            })
            .collect(),
    };
    let cluster = config.cluster()?;
    let signed = SignedDiscovery::sign(&discovery, cluster);

    let mut contents: Vec<String> = nodes.iter().map(key_text).collect();
    contents.push(config.to_text());
    contents.push(signed.to_text());
    contents.push(key_text(&discovery));
    contents.push(discovery.public_key().to_hex() + "\n");
    contents.push(key_text(&owner));
    for (path, text) in paths.iter().zip(&contents) {
        std::fs::write(path, text).map_err(|e| CliError::io(path.display(), e))?;
    }
    Ok(Generated { files: paths, config })
}
