//! Run configuration: a JSON file merged with command-line overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use facerig::datagen::{CanonicalSource, DatasetConfig, PerturbConfig};
use facerig::nnet::ModelConfig;
use facerig::train::{DirectFitConfig, LossConfig, TrainConfig};
use serde::{Deserialize, Serialize};

pub const FORMAT_VERSION: u32 = 1;
/// Written beside every command's outputs.
pub const ECHO_FILE: &str = "run_config.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    File,
    Flag,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub format_version: u32,
    /// Subcommand that wrote this echo.
    pub command: Option<String>,
    /// Master seed; overrides `dataset.seed` and `train.seed`.
    pub seed: Option<u64>,
    /// Rig manifest (`rig.json`).
    pub rig: Option<PathBuf>,
    /// Dataset directory or manifest.
    pub data: Option<PathBuf>,
    /// Train on the first `limit` samples only.
    pub limit: Option<usize>,
    pub dataset: DatasetConfig,
    pub perturb: PerturbConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub direct_fit: DirectFitConfig,
    /// Dotted key → where its value came from; absent keys are defaults.
    pub provenance: BTreeMap<String, Origin>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            format_version: FORMAT_VERSION,
            command: None,
            seed: None,
            rig: None,
            data: None,
            limit: None,
            dataset: DatasetConfig {
                canonical: CanonicalSource::Builtin,
                ..Default::default()
            },
            perturb: PerturbConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            direct_fit: DirectFitConfig::default(),
            provenance: BTreeMap::new(),
        }
    }
}

fn leaf_keys(v: &serde_json::Value, prefix: &str, out: &mut Vec<String>) {
    match v {
        serde_json::Value::Object(m) => {
            for (k, child) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                leaf_keys(child, &key, out);
            }
        }
        _ => out.push(prefix.to_string()),
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        if let Some(v) = value.get("format_version") {
            if v.as_u64() != Some(FORMAT_VERSION as u64) {
                bail!("{}: unsupported format_version {v}", path.display());
            }
        }
        let mut keys = Vec::new();
        leaf_keys(&value, "", &mut keys);
        let mut cfg: RunConfig =
            serde_json::from_value(value).with_context(|| format!("invalid config {}", path.display()))?;
        for k in keys {
            if k != "format_version" && k != "command" && !k.starts_with("provenance") {
                cfg.provenance.entry(k).or_insert(Origin::File);
            }
        }
        Ok(cfg)
    }

    /// Defaults, or the file at `path` when given.
    pub fn from_optional(path: Option<&Path>) -> anyhow::Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }

    pub fn mark(&mut self, key: &str) {
        self.provenance.insert(key.replace(' ', ""), Origin::Flag);
    }

    /// Writes the echo into `dir`.
    pub fn echo(&self, dir: &Path, command: &str) -> anyhow::Result<PathBuf> {
        let mut c = self.clone();
        c.command = Some(command.to_string());
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(ECHO_FILE);
        let text = serde_json::to_string_pretty(&c)?;
        std::fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

/// `cfg.a.b = v` for a present flag value, recording the override.
macro_rules! flag {
    ($cfg:ident, $val:expr => $($path:ident).+) => {
        if let Some(v) = $val {
            $cfg.$($path).+ = v;
            $cfg.mark(stringify!($($path).+));
        }
    };
}
pub(crate) use flag;
