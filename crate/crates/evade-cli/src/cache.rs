//! Content-addressed stage caching. Every stage directory carries a
//! `stage_manifest.json` recording the hash of everything the stage
//! consumed (configs, upstream manifests, the dataset) and the hash of
//! every file it produced. A stage is a cache hit when its recorded
//! inputs hash matches the current one and all artifacts still hash to
//! their recorded values.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use sha2::{Digest, Sha256};

pub const MANIFEST_NAME: &str = "stage_manifest.json";

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes =
        std::fs::read(path).with_context(|| format!("reading {} for hashing", path.display()))?;
    Ok(sha256_bytes(&bytes))
}

/// Derive a stage's RNG seed from the run seed and the stage name, so
/// changing one stage's behavior never perturbs another stage's stream.
pub fn stage_seed(run_seed: u64, stage: &str) -> u64 {
    let digest = Sha256::digest(format!("{run_seed}:{stage}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("digest is long enough"))
}

/// Combine the parts that determine a stage's output into one hash.
pub fn inputs_hash(parts: &[(&str, String)]) -> String {
    let mut hasher = Sha256::new();
    for (name, value) in parts {
        hasher.update(name.as_bytes());
        hasher.update(b"=");
        hasher.update(value.as_bytes());
        hasher.update(b"\n");
    }
    hex::encode(hasher.finalize())
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub run_seed: u64,
    pub stage_seed: u64,
    pub inputs_hash: String,
    /// file name (relative to the stage dir) -> sha256 of its bytes
    pub artifacts: BTreeMap<String, String>,
}

impl StageManifest {
    pub fn path_in(dir: &Path) -> PathBuf {
        dir.join(MANIFEST_NAME)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = Self::path_in(dir);
        let body = std::fs::read_to_string(&path)
            .with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&body).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let body = serde_json::to_string_pretty(self)?;
        std::fs::write(Self::path_in(dir), body)
            .with_context(|| format!("writing manifest in {}", dir.display()))?;
        Ok(())
    }
}

/// True when the stage directory holds a manifest matching `inputs` and
/// every recorded artifact hashes to its recorded value.
pub fn is_fresh(dir: &Path, inputs: &str) -> bool {
    let Ok(manifest) = StageManifest::load(dir) else {
        return false;
    };
    if manifest.inputs_hash != inputs {
        return false;
    }
    for (name, expected) in &manifest.artifacts {
        match sha256_file(&dir.join(name)) {
            Ok(actual) if &actual == expected => {}
            _ => return false,
        }
    }
    true
}

/// Record a completed stage: hash the named artifacts and write the
/// manifest next to them.
pub fn seal_stage(
    dir: &Path,
    stage: &str,
    run_seed: u64,
    seed: u64,
    inputs: &str,
    artifact_names: &[&str],
) -> Result<String> {
    let mut artifacts = BTreeMap::new();
    for name in artifact_names {
        artifacts.insert((*name).to_string(), sha256_file(&dir.join(name))?);
    }
    let manifest = StageManifest {
        stage: stage.to_string(),
        run_seed,
        stage_seed: seed,
        inputs_hash: inputs.to_string(),
        artifacts,
    };
    manifest.save(dir)?;
    sha256_file(&StageManifest::path_in(dir))
}

/// Hash of an upstream stage's manifest file; errors name the subcommand
/// that produces the missing artifact.
pub fn upstream_hash(dir: &Path, producer: &str) -> Result<String> {
    let path = StageManifest::path_in(dir);
    if !path.exists() {
        anyhow::bail!(
            "missing upstream artifact {}: run `{}` first",
            path.display(),
            producer
        );
    }
    sha256_file(&path)
}
