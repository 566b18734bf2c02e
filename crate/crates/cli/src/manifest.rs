//! Run manifests: what was asked for, what was read, what was written.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub subcommand: String,
    /// Arguments after config-file resolution, without `--config` and `--out`.
    pub args: Vec<String>,
    /// Directory relative input paths are resolved against.
    pub cwd: PathBuf,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    /// Input file to SHA-256.
    pub inputs: BTreeMap<String, String>,
    /// Output file, relative to the output directory, to SHA-256.
    pub outputs: BTreeMap<String, String>,
    pub wall_seconds: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub timings: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, dir: &Path) -> CliResult<()> {
        let path = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))
    }
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let mut f = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| CliError::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

/// Every regular file below `dir`, relative to it, sorted.
pub fn list_files(dir: &Path) -> CliResult<Vec<PathBuf>> {
    fn walk(root: &Path, rel: &Path, out: &mut Vec<PathBuf>) -> CliResult<()> {
        let here = root.join(rel);
        let entries = fs::read_dir(&here).map_err(|e| CliError::io(&here, e))?;
        for e in entries {
            let e = e.map_err(|e| CliError::io(&here, e))?;
            let ty = e.file_type().map_err(|err| CliError::io(&e.path(), err))?;
            let r = rel.join(e.file_name());
            if ty.is_dir() {
                walk(root, &r, out)?;
            } else if ty.is_file() {
                out.push(r);
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, Path::new(""), &mut out)?;
    out.sort();
    Ok(out)
}

/// Forward slashes so manifests compare across platforms.
pub fn rel_key(p: &Path) -> String {
    p.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

/// Collects input digests while a command runs.
#[derive(Debug, Default)]
pub struct Inputs(pub BTreeMap<String, String>);

impl Inputs {
    pub fn file(&mut self, path: &Path) -> CliResult<()> {
        let d = sha256_file(path)?;
        self.0.insert(path.display().to_string(), d);
        Ok(())
    }

    pub fn files_under(&mut self, dir: &Path, rel: &[PathBuf]) -> CliResult<()> {
        for r in rel {
            self.file(&dir.join(r))?;
        }
        Ok(())
    }
}

/// Digests of every file in `dir` except the manifest itself.
pub fn output_digests(dir: &Path) -> CliResult<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for rel in list_files(dir)? {
        if rel == Path::new(MANIFEST_FILE) {
            continue;
        }
        out.insert(rel_key(&rel), sha256_file(&dir.join(&rel))?);
    }
    Ok(out)
}
