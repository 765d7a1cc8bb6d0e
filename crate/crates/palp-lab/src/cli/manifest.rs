//! Run manifests: the JSON record tying a run directory's artifacts to the
//! exact inputs that produced them.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FORMAT: u32 = 1;

/// Written as `manifest.json` in every run directory. Reruns with the same
/// config hash and seed reproduce every referenced artifact byte-for-byte;
/// only the timestamps differ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: u32,
    /// Subcommand that produced the run.
    pub command: String,
    /// Full argv the process was invoked with.
    pub argv: Vec<String>,
    /// SHA-256 over the resolved run inputs (flags, config file and
    /// defaults already merged, input checkpoint digests included).
    pub config_hash: String,
    pub seed: u64,
    /// Run directory, as given (not canonicalized).
    pub output_dir: String,
    /// Checkpoints this run read.
    pub checkpoint_inputs: Vec<String>,
    /// Checkpoints this run wrote.
    pub checkpoint_outputs: Vec<String>,
    /// Every other artifact the run emitted, relative to `output_dir`.
    pub artifacts: Vec<String>,
    pub created_unix: u64,
    pub finished_unix: u64,
}

pub fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Hex SHA-256 of any serializable value's canonical JSON.
pub fn hash_json<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("manifest inputs serialize");
    let mut hasher = Sha256::new();
    hasher.update(json.as_bytes());
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Hex SHA-256 of a file's bytes (used to pin input checkpoints).
pub fn hash_file(path: &Path) -> std::io::Result<String> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

impl RunManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(text: &str) -> Result<RunManifest, serde_json::Error> {
        serde_json::from_str(text)
    }
}
