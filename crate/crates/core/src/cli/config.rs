//! The single experiment config: JSON file, then `--set key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::atm::DisenConfig;
use crate::corpus::CorpusConfig;
use crate::error::{Error, Result};
use crate::pretrain::{GeneratorTrainConfig, IdentityTrainConfig, ParserTrainConfig};
use crate::vfgm::MapperConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub same_pairs: usize,
    pub diff_pairs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            same_pairs: 200,
            diff_pairs: 200,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub seed: Option<u64>,
    pub corpus: CorpusConfig,
    pub parser: ParserTrainConfig,
    pub identity: IdentityTrainConfig,
    /// Independent embedder used only for evaluation.
    pub heldout: IdentityTrainConfig,
    pub generator: GeneratorTrainConfig,
    pub mapper: MapperConfig,
    pub disennet: DisenConfig,
    pub evaluate: EvalConfig,
}

fn config_error(key: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        message: message.into(),
    }
}

/// Sets `a.b.c` in a JSON object tree, creating intermediate objects.
fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(config_error(key, "malformed key"));
    }
    let mut node = root;
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| config_error(parts[..i].join("."), "not an object"))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("key has at least one part")
}

/// `key=value` where `value` is JSON, or a bare string if it does not parse.
pub fn parse_override(raw: &str) -> Result<(String, Value)> {
    let (k, v) = raw
        .split_once('=')
        .ok_or_else(|| config_error(raw, "override must look like key=value"))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

impl Config {
    /// Reads `path` (if any), applies overrides in order, and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut root = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::record(p, e.to_string()))?;
                serde_json::from_str(&text).map_err(|e| config_error("<file>", format!("{}: {e}", p.display())))?
            }
            None => Value::Object(Default::default()),
        };
        if !root.is_object() {
            return Err(config_error("<root>", "config must be a JSON object"));
        }
        for raw in overrides {
            let (k, v) = parse_override(raw)?;
            set_path(&mut root, &k, v)?;
        }
        Self::from_value(root)
    }

    pub fn from_value(root: Value) -> Result<Self> {
        let cfg: Config = serde_path_to_error::deserialize(root).map_err(|e| {
            let inner = e.inner().to_string();
            let mut key = e.path().to_string();
            if let Some(field) = inner
                .strip_prefix("unknown field `")
                .and_then(|rest| rest.split('`').next())
            {
                key = if key == "." || key.is_empty() || key == field {
                    field.to_string()
                } else if key.ends_with(&format!(".{field}")) {
                    key
                } else {
                    format!("{key}.{field}")
                };
            }
            config_error(key, inner)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let prefixed = |section: &str, e: Error| match e {
            Error::Config { key, message } => config_error(format!("{section}.{key}"), message),
            other => other,
        };
        self.mapper.validate().map_err(|e| prefixed("mapper", e))?;
        self.disennet.validate().map_err(|e| prefixed("disennet", e))?;
        for (k, v) in [
            ("parser.batch_size", self.parser.batch_size),
            ("identity.batch_size", self.identity.batch_size),
            ("heldout.batch_size", self.heldout.batch_size),
            ("generator.batch_size", self.generator.batch_size),
        ] {
            if v == 0 {
                return Err(config_error(k, "must be positive"));
            }
        }
        if !(0.0..=1.0).contains(&self.generator.mix_fraction) {
            return Err(config_error("generator.mix_fraction", "must lie in [0,1]"));
        }
        if self.corpus.identities == 0 && self.corpus.total() > 0 {
            return Err(config_error("corpus.identities", "must be positive for a non-empty corpus"));
        }
        Ok(())
    }

    /// Compact JSON in declaration order.
    pub fn canonical_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(self.canonical_json()?.as_bytes()))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Seed precedence: flag, then the config file, then `IDHIDER_SEED`, then 0.
pub fn resolve_seed(flag: Option<u64>, cfg: &Config, env_seed: Option<&str>) -> Result<u64> {
    if let Some(s) = flag.or(cfg.seed) {
        return Ok(s);
    }
    match env_seed {
        Some(v) => v
            .trim()
            .parse()
            .map_err(|_| config_error("IDHIDER_SEED", format!("`{v}` is not an unsigned integer"))),
        None => Ok(0),
    }
}

/// Per-stage seed: first 8 bytes of `sha256(seed ‖ stage)`.
pub fn stage_seed(seed: u64, stage: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stage.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}
