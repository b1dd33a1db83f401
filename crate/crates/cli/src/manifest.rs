use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use ckfnet::training::{TrainingConfig, INIT_SEED_OFFSET, SHUFFLE_SEED_OFFSET, TEST_SEED_OFFSET, VAL_SEED_OFFSET};

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Run record written next to the outputs of every command.
pub struct Manifest {
    verb: &'static str,
    config_path: Option<PathBuf>,
    overrides: Vec<(String, String)>,
    env_seed: Option<u64>,
    threads: usize,
    inputs: Vec<PathBuf>,
    artifacts: Vec<PathBuf>,
    summary: Map<String, Value>,
}

impl Manifest {
    pub fn new(
        verb: &'static str,
        config_path: Option<PathBuf>,
        overrides: Vec<(String, String)>,
        env_seed: Option<u64>,
        threads: usize,
    ) -> Self {
        Self {
            verb,
            config_path,
            overrides,
            env_seed,
            threads,
            inputs: Vec::new(),
            artifacts: Vec::new(),
            summary: Map::new(),
        }
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    pub fn artifact(&mut self, path: &Path) {
        self.artifacts.push(path.to_path_buf());
    }

    pub fn summary(&mut self, key: &str, value: Value) {
        self.summary.insert(key.to_string(), value);
    }

    pub fn file_name(verb: &str) -> String {
        format!("manifest-{verb}.json")
    }

    pub fn write(&self, out: &Path, config: &TrainingConfig) -> Result<PathBuf> {
        let hashed = |paths: &[PathBuf]| -> Result<Vec<Value>> {
            paths
                .iter()
                .map(|p| Ok(json!({ "path": p.display().to_string(), "sha256": sha256_file(p)? })))
                .collect()
        };
        let mut inputs = hashed(&self.inputs)?;
        if let Some(p) = &self.config_path {
            inputs.insert(0, json!({ "path": p.display().to_string(), "sha256": sha256_file(p)? }));
        }
        let base = config.base_seed;
        let doc = json!({
            "tool": format!("ckfnet {}", env!("CARGO_PKG_VERSION")),
            "verb": self.verb,
            "argv": std::env::args().collect::<Vec<_>>(),
            "config_path": self.config_path.as_ref().map(|p| p.display().to_string()),
            "overrides": self.overrides.iter().map(|(k, v)| json!({ "key": k, "value": v })).collect::<Vec<_>>(),
            "ckfnet_seed_env": self.env_seed,
            "config": serde_json::to_value(config)?,
            "config_toml": config.to_toml_string(),
            "config_fingerprint": config.fingerprint(),
            "seeds": {
                "base": base,
                "train": base,
                "val": base.wrapping_add(VAL_SEED_OFFSET),
                "test": base.wrapping_add(TEST_SEED_OFFSET),
                "init": base.wrapping_add(INIT_SEED_OFFSET),
                "shuffle": base.wrapping_add(SHUFFLE_SEED_OFFSET),
            },
            "threads": self.threads,
            "inputs": inputs,
            "artifacts": hashed(&self.artifacts)?,
            "summary": Value::Object(self.summary.clone()),
        });
        let path = out.join(Self::file_name(self.verb));
        std::fs::write(&path, serde_json::to_string_pretty(&doc)? + "\n")
            .with_context(|| format!("cannot write {}", path.display()))?;
        Ok(path)
    }
}
