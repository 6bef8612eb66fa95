//! Run manifests: every command that writes artifacts records what produced
//! them — the command name, the fully resolved configuration, and a SHA-256
//! content hash of each input file. Timestamps are deliberately absent so a
//! reproduced run yields a byte-identical manifest.

use std::fmt::Write as _;
use std::path::Path;

use backstep::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST_NAME: &str = "manifest.toml";

/// Creates the output directory and enforces the one-manifest rule: if a
/// manifest already exists the command refuses to touch the directory unless
/// forced.
pub fn claim_output_dir(dir: &Path, force: bool) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = dir.join(MANIFEST_NAME);
    if manifest.exists() && !force {
        return Err(Error::InvalidConfig {
            field: "out",
            message: format!(
                "{} already contains a manifest from a previous run; \
                 pass --force to overwrite",
                dir.display()
            ),
        });
    }
    Ok(())
}

/// Hex SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for b in digest {
        let _ = write!(hex, "{b:02x}");
    }
    Ok(hex)
}

/// Writes `manifest.toml` into `dir`: the command, the resolved config
/// echo, and one `sha256:` line per named input file.
pub fn write_manifest(
    dir: &Path,
    command: &str,
    config: &impl Serialize,
    inputs: &[(&str, &Path)],
) -> Result<()> {
    let config_toml = toml::to_string(config).map_err(|e| Error::InvalidConfig {
        field: "config",
        message: format!("cannot serialize resolved config: {e}"),
    })?;
    let mut text = String::new();
    let _ = writeln!(text, "command = {command:?}");
    let _ = writeln!(text);
    let _ = writeln!(text, "[config]");
    text.push_str(&config_toml);
    let _ = writeln!(text);
    let _ = writeln!(text, "[inputs]");
    for (name, path) in inputs {
        let _ = writeln!(text, "{name} = \"sha256:{}\"", file_sha256(path)?);
    }
    std::fs::write(dir.join(MANIFEST_NAME), text)?;
    Ok(())
}
