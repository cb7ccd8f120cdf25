//! Provenance records written next to every command's outputs.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use serde::Serialize;
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

use crate::config::SeedSource;
use crate::failure::{CliResult, Failure};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const ARTIFACT: &str = "mtda";

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub artifact: &'static str,
    pub artifact_version: &'static str,
    pub command: String,
    /// Effective configuration after defaults and overrides.
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub seed_source: SeedSource,
    pub inputs: Vec<FileDigest>,
    pub started: String,
    pub finished: String,
    pub outputs: Vec<String>,
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

fn io_failure(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::input(format!("{}: {e}", path.display()))
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let mut file = fs::File::open(path).map_err(|e| io_failure(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf).map_err(|e| io_failure(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Digests of every regular file under `path` (or `path` itself), sorted by
/// path. Manifests of earlier runs are skipped.
pub fn digest_tree(path: &Path) -> CliResult<Vec<FileDigest>> {
    let mut out = Vec::new();
    for entry in WalkDir::new(path).sort_by_file_name() {
        let entry = entry.map_err(|e| io_failure(path, e))?;
        if !entry.file_type().is_file() || entry.file_name() == MANIFEST_FILE {
            continue;
        }
        out.push(FileDigest {
            path: entry.path().display().to_string(),
            sha256: sha256_file(entry.path())?,
        });
    }
    Ok(out)
}

/// One digest for a whole directory: SHA-256 over `<relative path> <digest>`
/// lines, so it does not depend on where the tree lives.
pub fn tree_digest(root: &Path) -> CliResult<String> {
    let mut hasher = Sha256::new();
    for d in digest_tree(root)? {
        let rel = Path::new(&d.path).strip_prefix(root).unwrap_or(Path::new(&d.path));
        hasher.update(format!("{} {}\n", rel.display(), d.sha256).as_bytes());
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Accumulates a manifest while a command runs.
pub struct ManifestBuilder {
    manifest: RunManifest,
}

impl ManifestBuilder {
    pub fn start(command: &str, config: &impl Serialize, seed: Option<u64>, seed_source: SeedSource) -> Self {
        ManifestBuilder {
            manifest: RunManifest {
                artifact: ARTIFACT,
                artifact_version: env!("CARGO_PKG_VERSION"),
                command: command.to_string(),
                config: serde_json::to_value(config).expect("configs serialize"),
                seed,
                seed_source,
                inputs: Vec::new(),
                started: now(),
                finished: String::new(),
                outputs: Vec::new(),
            },
        }
    }

    pub fn input(&mut self, path: &Path) -> CliResult<()> {
        let digests = digest_tree(path)?;
        self.manifest.inputs.extend(digests);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.manifest.outputs.push(path.display().to_string());
    }

    /// Stamps the end time and writes `<dir>/manifest.json`.
    pub fn finish(mut self, dir: &Path) -> CliResult<PathBuf> {
        self.manifest.finished = now();
        let path = dir.join(MANIFEST_FILE);
        self.manifest.outputs.push(path.display().to_string());
        write_json(&path, &self.manifest)?;
        Ok(path)
    }
}

pub fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).expect("documents serialize");
    text.push('\n');
    fs::write(path, text).map_err(|e| io_failure(path, e))
}

pub fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| io_failure(path, e))
}
