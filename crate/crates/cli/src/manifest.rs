//! Run manifests and config loading with input provenance.

use std::fs;
use std::path::{Path, PathBuf};

use odm_core::simulator::{SimulationFile, SimulationConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const MANIFEST_SCHEMA: &str = "odm-run-manifest";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeedSource {
    Flag,
    Config,
    Default,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolvedSeed {
    pub config: PathBuf,
    pub seed: u64,
    pub source: SeedSource,
}

/// The command line a run directory came from, enough to repeat it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "lowercase")]
pub enum Invocation {
    Simulate {
        seed: Option<u64>,
        strategy: Option<String>,
        format: String,
        trace_format: String,
        save_state_at: Vec<u64>,
    },
    Compare {
        seed: Option<u64>,
        strategies: Vec<String>,
        workers: usize,
        format: String,
    },
}

/// Written to the output directory before a run starts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: String,
    pub artifact_version: String,
    pub invocation: Invocation,
    pub configs: Vec<InputDigest>,
    /// Files the configs reference: weight tables, corpus manifests and data.
    pub inputs: Vec<InputDigest>,
    pub seeds: Vec<ResolvedSeed>,
    /// Digests of the fully resolved configs, one per run.
    pub resolved_configs: Vec<String>,
    pub output_dir: PathBuf,
}

impl RunManifest {
    pub fn new(invocation: Invocation, loaded: &[LoadedConfig], resolved: &[SimulationConfig], out: &Path) -> Self {
        let mut inputs: Vec<InputDigest> = loaded.iter().flat_map(|l| l.inputs.clone()).collect();
        inputs.sort_by(|a, b| a.path.cmp(&b.path));
        inputs.dedup();
        Self {
            schema: MANIFEST_SCHEMA.into(),
            artifact_version: env!("CARGO_PKG_VERSION").into(),
            invocation,
            configs: loaded.iter().map(|l| l.digest.clone()).collect(),
            inputs,
            seeds: loaded
                .iter()
                .map(|l| ResolvedSeed { config: l.digest.path.clone(), seed: l.config.seed, source: l.seed_source })
                .collect(),
            resolved_configs: resolved.iter().map(|c| c.digest()).collect(),
            output_dir: out.to_path_buf(),
        }
    }

    pub fn write(&self, dir: &Path) -> CliResult<()> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes") + "\n";
        fs::write(&path, text).map_err(|e| CliError::io("cannot write manifest", &path, e))
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io("cannot read manifest", path, e))?;
        let m: Self =
            serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: not a run manifest: {e}", path.display())))?;
        if m.schema != MANIFEST_SCHEMA {
            return Err(CliError::usage(format!("{}: schema '{}' is not {MANIFEST_SCHEMA}", path.display(), m.schema)));
        }
        Ok(m)
    }

    /// Fail if any recorded input no longer has the recorded content.
    pub fn check_inputs(&self) -> CliResult<()> {
        for d in self.configs.iter().chain(&self.inputs) {
            let now = digest_file(&d.path)?;
            if now.sha256 != d.sha256 {
                return Err(CliError::usage(format!("{} changed since the run was recorded", d.path.display())));
            }
        }
        Ok(())
    }
}

pub fn digest_file(path: &Path) -> CliResult<InputDigest> {
    let bytes = fs::read(path).map_err(|e| CliError::io("cannot read input", path, e))?;
    Ok(InputDigest { path: path.to_path_buf(), sha256: hex::encode(Sha256::digest(&bytes)) })
}

pub struct LoadedConfig {
    pub digest: InputDigest,
    pub inputs: Vec<InputDigest>,
    pub seed_source: SeedSource,
    pub config: SimulationConfig,
}

#[derive(Deserialize)]
struct CorpusManifest {
    domain: Vec<CorpusDomain>,
}

#[derive(Deserialize)]
struct CorpusDomain {
    files: Vec<PathBuf>,
}

fn relative_to(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Read and resolve a simulation config, recording every file it pulls in.
pub fn load_config(path: &Path, seed_flag: Option<u64>) -> CliResult<LoadedConfig> {
    if !path.is_file() {
        return Err(CliError::usage(format!("config file not found: {}", path.display())));
    }
    let path = path.canonicalize().map_err(|e| CliError::io("cannot resolve config path", path, e))?;
    let text = fs::read_to_string(&path).map_err(|e| CliError::io("cannot read config", &path, e))?;
    let file: SimulationFile =
        toml::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let config = file.resolve(&base, seed_flag)?;

    let mut referenced: Vec<PathBuf> = [&file.strategy.weights_file, &file.policy.initial_weights_file]
        .into_iter()
        .flatten()
        .map(|p| relative_to(&base, p))
        .collect();
    if let Some(manifest) = file.corpus.as_ref().and_then(|c| c.manifest.as_ref()) {
        let manifest = relative_to(&base, manifest);
        let text = fs::read_to_string(&manifest).map_err(|e| CliError::io("cannot read corpus manifest", &manifest, e))?;
        let parsed: CorpusManifest =
            toml::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", manifest.display())))?;
        let dir = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
        referenced.extend(parsed.domain.iter().flat_map(|d| d.files.iter().map(|f| relative_to(&dir, f))));
        referenced.push(manifest);
    }
    let inputs = referenced.iter().map(|p| digest_file(p)).collect::<CliResult<Vec<_>>>()?;

    let seed_source = match (seed_flag, file.seed.or(file.policy.seed)) {
        (Some(_), _) => SeedSource::Flag,
        (None, Some(_)) => SeedSource::Config,
        (None, None) => SeedSource::Default,
    };
    Ok(LoadedConfig { digest: InputDigest { path, sha256: hex::encode(Sha256::digest(text.as_bytes())) }, inputs, seed_source, config })
}
