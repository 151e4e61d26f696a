//! Run manifests: the resolved config plus a content hash over every input
//! artifact, enough to verify a rerun consumed exactly the same bytes.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunFile;
use crate::Failure;

#[derive(Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: String,
    pub config: serde_json::Value,
    pub inputs_hash: String,
    pub output_dir: String,
}

impl RunManifest {
    pub fn new(
        command: String,
        config_path: &str,
        config: &RunFile,
        input_dirs: &[&Path],
        out: &Path,
    ) -> Result<RunManifest, Failure> {
        Ok(RunManifest {
            command,
            config_path: config_path.to_string(),
            config: serde_json::to_value(config).map_err(Failure::io)?,
            inputs_hash: hash_inputs(config, input_dirs)?,
            output_dir: out.display().to_string(),
        })
    }

    pub fn write(&self, out: &Path) -> Result<(), Failure> {
        let path = out.join("run_manifest.json");
        let json = serde_json::to_string_pretty(self).map_err(Failure::io)?;
        std::fs::write(&path, json + "\n")
            .with_context(|| format!("writing {}", path.display()))
            .map_err(Failure::io)
    }
}

/// SHA-256 over the resolved config and every file of every input directory
/// in sorted relative-path order.
fn hash_inputs(config: &RunFile, dirs: &[&Path]) -> Result<String, Failure> {
    let mut h = Sha256::new();
    let config_json = serde_json::to_string(config).map_err(Failure::io)?;
    h.update(config_json.as_bytes());
    for dir in dirs {
        for rel in walk_sorted(dir)? {
            let path = dir.join(&rel);
            let bytes = std::fs::read(&path)
                .with_context(|| format!("hashing input {}", path.display()))
                .map_err(Failure::io)?;
            h.update(rel.to_string_lossy().as_bytes());
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(&bytes);
        }
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn walk_sorted(dir: &Path) -> Result<Vec<PathBuf>, Failure> {
    fn visit(root: &Path, sub: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
        let mut entries: Vec<_> =
            std::fs::read_dir(root.join(sub))?.collect::<Result<_, _>>()?;
        entries.sort_by_key(|e| e.file_name());
        for e in entries {
            let rel = sub.join(e.file_name());
            if e.file_type()?.is_dir() {
                visit(root, &rel, out)?;
            } else {
                out.push(rel);
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    visit(dir, Path::new(""), &mut out)
        .with_context(|| format!("walking inputs under {}", dir.display()))
        .map_err(Failure::io)?;
    Ok(out)
}
