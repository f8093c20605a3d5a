//! On-disk formats for requests, results and certificates (hex of the
//! canonical encoding, one line), inputs (a JSON array of numbers) and the
//! signed discovery file.

use std::path::{Path, PathBuf};

use quorate_core::client::{Endpoints, SignedDiscovery};
use quorate_core::codec::{Decode, Encode};
use quorate_core::domain::ClusterConfig;

use crate::keys::{read_public, DISCOVERY_PUB};
use crate::{CliError, Result};

pub fn write_hex<T: Encode + ?Sized>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, hex::encode(value.to_canonical()) + "\n").map_err(|e| CliError::io(path.display(), e))
}

pub fn read_hex<T: Decode>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path.display(), e))?;
    let bytes = hex::decode(text.trim()).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    T::from_canonical(&bytes).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn read_input(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path.display(), e))?;
    let input: Vec<f64> = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: expected a JSON array of numbers: {e}", path.display())))?;
    if input.is_empty() {
        return Err(CliError::Config(format!("{}: empty input", path.display())));
    }
    Ok(input)
}

/// Loads the discovery file and checks it against the trusted discovery
/// key, by default `discovery.pub` next to it.
pub fn load_discovery(path: &Path, trust: Option<&Path>) -> Result<(ClusterConfig, Endpoints)> {
    let trust: PathBuf = match trust {
        Some(t) => t.to_path_buf(),
        None => path.with_file_name(DISCOVERY_PUB),
    };
    if !trust.exists() {
        return Err(CliError::Discovery(format!(
            "no trusted discovery key at {} (use --trust)",
            trust.display()
        )));
    }
    let trusted = read_public(&trust)?;
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path.display(), e))?;
    let signed = SignedDiscovery::from_text(&text)
        .map_err(|e| CliError::Discovery(format!("{}: {e}", path.display())))?;
    let endpoints = signed
        .verify(Some(&trusted))
        .map_err(|e| CliError::Discovery(format!("{}: {e}", path.display())))?;
    Ok((signed.cluster, endpoints))
}
