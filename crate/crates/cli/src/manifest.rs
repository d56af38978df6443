//! Run manifests: configuration snapshot, artifact hashes and metrics.
//!
//! Timings live in a separate file next to the manifest so the manifest itself
//! is reproducible bit for bit.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::PipelineConfig;
use crate::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub mode: Option<String>,
    pub seed: u64,
    pub config: serde_json::Value,
    /// Root-relative path to SHA-256 of every artifact read.
    pub inputs: BTreeMap<String, String>,
    /// Root-relative path to SHA-256 of every artifact written.
    pub outputs: BTreeMap<String, String>,
    pub metrics: BTreeMap<String, serde_json::Value>,
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Writes through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| CliError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| CliError::io(&tmp, e))?;
    f.sync_all().map_err(|e| CliError::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

/// Collects the manifest of one subcommand while it runs.
pub struct Run {
    root: PathBuf,
    manifest_dir: PathBuf,
    name: String,
    manifest: RunManifest,
    timings: Vec<(String, f64)>,
}

impl Run {
    pub fn start(cfg: &PipelineConfig, subcommand: &str, mode: Option<&str>, name: &str) -> Self {
        Self {
            root: cfg.root(),
            manifest_dir: cfg.outputs_dir().join("manifests"),
            name: name.to_string(),
            manifest: RunManifest {
                subcommand: subcommand.to_string(),
                mode: mode.map(str::to_string),
                seed: cfg.seed,
                config: cfg.snapshot(),
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
                metrics: BTreeMap::new(),
            },
            timings: Vec::new(),
        }
    }

    fn key(&self, path: &Path) -> String {
        let rel = path.strip_prefix(&self.root).unwrap_or(path);
        rel.components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect::<Vec<_>>()
            .join("/")
    }

    pub fn input(&mut self, path: &Path) -> CliResult<()> {
        let h = sha256_file(path)?;
        self.manifest.inputs.insert(self.key(path), h);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> CliResult<()> {
        let h = sha256_file(path)?;
        self.manifest.outputs.insert(self.key(path), h);
        Ok(())
    }

    pub fn metric(&mut self, key: &str, value: impl Serialize) {
        let v = serde_json::to_value(value).expect("metric serializes to JSON");
        self.manifest.metrics.insert(key.to_string(), v);
    }

    /// Runs `f` and adds its wall time to `stage`.
    pub fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> CliResult<T>) -> CliResult<T> {
        let t0 = Instant::now();
        let out = f();
        self.timings.push((stage.to_string(), t0.elapsed().as_secs_f64()));
        out
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.manifest_dir.join(format!("{}.json", self.name))
    }

    /// Writes the manifest and the timings file.
    pub fn finish(self) -> CliResult<RunManifest> {
        let body = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        let path = self.manifest_path();
        write_atomic(&path, format!("{body}\n").as_bytes())?;
        let mut timings = BTreeMap::new();
        for (stage, secs) in &self.timings {
            *timings.entry(stage.as_str()).or_insert(0.0) += secs;
        }
        let tbody = serde_json::to_string_pretty(&timings).expect("timings serialize");
        let tpath = self.manifest_dir.join(format!("{}.timings.json", self.name));
        write_atomic(&tpath, format!("{tbody}\n").as_bytes())?;
        Ok(self.manifest)
    }
}
