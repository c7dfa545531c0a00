//! Run manifests: what was run, with which config, and hashes of every CSV written.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::experiments::Verdict;
use crate::tasks::{run_task, Task};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputEntry {
    pub file: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub task: Task,
    pub force: bool,
    /// The effective configuration, after command-line overrides.
    pub config: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub versions: BTreeMap<String, String>,
    pub started_unix: u64,
    pub wall_clock_secs: f64,
    pub threads: usize,
    pub outputs: Vec<OutputEntry>,
    pub verdict: Option<Verdict>,
}

pub fn sha256_hex(data: &[u8]) -> String {
    hex::encode(Sha256::digest(data))
}

fn versions() -> BTreeMap<String, String> {
    BTreeMap::from([
        ("frontlab-core".to_string(), frontlab::VERSION.to_string()),
        ("frontlab-cli".to_string(), env!("CARGO_PKG_VERSION").to_string()),
    ])
}

/// Runs `task`, writes its CSV files and `manifest.json` into `out`.
pub fn execute(task: Task, cfg: &ExperimentConfig, force: bool, out: &Path) -> anyhow::Result<RunManifest> {
    let started_unix = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let clock = Instant::now();
    let result = run_task(task, cfg, force)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut outputs = Vec::new();
    for file in &result.files {
        let path = out.join(&file.name);
        fs::write(&path, &file.body).with_context(|| format!("writing {}", path.display()))?;
        outputs.push(OutputEntry { file: file.name.clone(), sha256: sha256_hex(file.body.as_bytes()), bytes: file.body.len() });
    }
    let config = cfg.to_toml();
    let manifest = RunManifest {
        task,
        force,
        config_hash: sha256_hex(config.as_bytes()),
        config,
        seeds: cfg.experiment.seeds.clone(),
        versions: versions(),
        started_unix,
        wall_clock_secs: clock.elapsed().as_secs_f64(),
        threads: rayon::current_num_threads(),
        outputs,
        verdict: result.verdict,
    };
    let path = out.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).with_context(|| format!("writing {}", path.display()))?;
    Ok(manifest)
}

pub fn load(path: &Path) -> anyhow::Result<RunManifest> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| crate::CliError::Config(format!("bad manifest {}: {e}", path.display())).into())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RerunReport {
    pub manifest: RunManifest,
    /// (file, identical) for every file in the original manifest.
    pub files: Vec<(String, bool)>,
    pub out: PathBuf,
}

impl RerunReport {
    pub fn identical(&self) -> bool {
        self.files.iter().all(|(_, same)| *same)
    }
}

/// Re-executes a manifest into `out` and compares output hashes.
pub fn rerun(manifest_path: &Path, out: &Path) -> anyhow::Result<RerunReport> {
    let original = load(manifest_path)?;
    if sha256_hex(original.config.as_bytes()) != original.config_hash {
        return Err(crate::CliError::Config("manifest config does not match its hash".into()).into());
    }
    let cfg = ExperimentConfig::from_toml(&original.config)?;
    let fresh = execute(original.task, &cfg, original.force, out)?;
    let files = original
        .outputs
        .iter()
        .map(|o| {
            let same = fresh.outputs.iter().any(|n| n.file == o.file && n.sha256 == o.sha256);
            (o.file.clone(), same)
        })
        .collect();
    Ok(RerunReport { manifest: fresh, files, out: out.to_path_buf() })
}
