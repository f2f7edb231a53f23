//! Layered run configuration and run manifests.
//!
//! Layers merge at the TOML value level: command-line `key.path=value`
//! overrides, then `GRAIN_*` environment variables, then the config file,
//! then the defaults of the selected preset.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use toml::{Table, Value};

use crate::annotation::AnnotateConfig;
use crate::training::TrainConfig;
use crate::zeroshot::DEFAULT_TEMPLATE;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key {0}")]
    UnknownKey(String),
    #[error("invalid value for {key}: {message}")]
    Invalid { key: String, message: String },
    #[error("cannot parse {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("io error on {0}: {1}")]
    Io(PathBuf, std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    Default,
    Tiny,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    /// Prompt pattern with `{classname}` and `{description}` slots.
    pub template: String,
    pub ks: Vec<usize>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { template: DEFAULT_TEMPLATE.into(), ks: vec![1, 5, 10] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrainConfig {
    pub preset: Preset,
    pub train: TrainConfig,
    pub annotate: AnnotateConfig,
    pub eval: EvalSettings,
}

impl Default for GrainConfig {
    fn default() -> Self {
        Self::for_preset(Preset::Default)
    }
}

impl GrainConfig {
    pub fn for_preset(preset: Preset) -> Self {
        let train = match preset {
            Preset::Default => TrainConfig::default(),
            Preset::Tiny => TrainConfig::tiny(),
        };
        Self { preset, train, annotate: AnnotateConfig::default(), eval: EvalSettings::default() }
    }
}

/// Keys that are valid but absent from the serialized defaults because they default to `None`.
const OPTIONAL_KEYS: &[&str] = &["train.warmup_steps", "train.grad_clip"];

/// Recursive merge; scalars and arrays in `over` replace those in `base`.
pub fn merge(base: &mut Table, over: &Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

fn leaf_paths(t: &Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in t {
        let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(sub) => leaf_paths(sub, &p, out),
            _ => out.push(p),
        }
    }
}

fn schema() -> Table {
    let mut t = Table::try_from(GrainConfig::default()).expect("defaults serialize");
    for key in OPTIONAL_KEYS {
        let _ = set_path(&mut t, key, Value::Integer(0));
    }
    t
}

/// Every leaf key path accepted in a config.
pub fn known_keys() -> Vec<String> {
    let mut out = Vec::new();
    leaf_paths(&schema(), "", &mut out);
    out
}

fn check_keys(t: &Table, schema: &Table, prefix: &str) -> Result<(), ConfigError> {
    for (k, v) in t {
        let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (schema.get(k), v) {
            (None, _) => return Err(ConfigError::UnknownKey(p)),
            (Some(Value::Table(s)), Value::Table(sub)) => check_keys(sub, s, &p)?,
            (Some(Value::Table(_)), _) => {
                return Err(ConfigError::Invalid { key: p, message: "expected a table".into() })
            }
            (Some(_), Value::Table(_)) => {
                return Err(ConfigError::UnknownKey(format!("{p}.{}", v.as_table().and_then(|x| x.keys().next()).map_or("", |s| s))))
            }
            _ => {}
        }
    }
    Ok(())
}

fn set_path(t: &mut Table, path: &str, value: Value) -> Result<(), ConfigError> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::UnknownKey(path.to_string()));
    }
    let mut cur = t;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(x) => x,
            _ => return Err(ConfigError::Invalid { key: path.to_string(), message: format!("{p} is not a table") }),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Reads `raw` as a TOML value, falling back to a bare string.
pub fn parse_value(raw: &str) -> Value {
    match toml::from_str::<Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// `key.path=value` pairs into a table.
pub fn overrides_table(pairs: &[(String, String)]) -> Result<Table, ConfigError> {
    let mut t = Table::new();
    for (k, v) in pairs {
        set_path(&mut t, k.trim(), parse_value(v.trim()))?;
    }
    Ok(t)
}

/// Splits `key.path=value`.
pub fn parse_assignment(s: &str) -> Result<(String, String), ConfigError> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.to_string()))
        .ok_or_else(|| ConfigError::Invalid { key: s.to_string(), message: "expected key=value".into() })
}

/// Environment name for a key path: `train.batch_size` is `GRAIN_TRAIN_BATCH_SIZE`.
pub fn env_name(key: &str) -> String {
    format!("GRAIN_{}", key.replace('.', "_").to_uppercase())
}

/// Environment variables into a table. Only variables with the `GRAIN_`
/// prefix are considered and each must name a known key.
pub fn env_table(vars: &[(String, String)]) -> Result<Table, ConfigError> {
    let names: BTreeMap<String, String> = known_keys().into_iter().map(|k| (env_name(&k), k)).collect();
    let mut pairs = Vec::new();
    for (name, v) in vars {
        if !name.starts_with("GRAIN_") {
            continue;
        }
        let key = names.get(name).ok_or_else(|| ConfigError::UnknownKey(name.clone()))?;
        pairs.push((key.clone(), v.clone()));
    }
    overrides_table(&pairs)
}

pub fn read_config_file(path: &Path) -> Result<Table, ConfigError> {
    let text = fs::read_to_string(path).map_err(|e| ConfigError::Io(path.to_path_buf(), e))?;
    toml::from_str(&text).map_err(|e| ConfigError::Parse { path: path.to_path_buf(), message: e.to_string() })
}

/// Merges the layers over the preset defaults and deserializes the result.
pub fn resolve_config(file: Option<&Table>, cli: &[(String, String)], env: &[(String, String)]) -> Result<GrainConfig, ConfigError> {
    let schema = schema();
    let mut layered = Table::new();
    let layers = [file.cloned(), Some(env_table(env)?), Some(overrides_table(cli)?)];
    for layer in layers.iter().flatten() {
        check_keys(layer, &schema, "")?;
        merge(&mut layered, layer);
    }
    let preset: Preset = match layered.get("preset") {
        Some(v) => v.clone().try_into().map_err(|e: toml::de::Error| ConfigError::Invalid { key: "preset".into(), message: e.to_string() })?,
        None => Preset::Default,
    };
    let mut full = Table::try_from(GrainConfig::for_preset(preset)).expect("defaults serialize");
    merge(&mut full, &layered);
    Value::Table(full).try_into().map_err(|e: toml::de::Error| ConfigError::Invalid { key: error_key(&e), message: e.message().to_string() })
}

fn error_key(e: &toml::de::Error) -> String {
    // toml reports the failing field in the message; fall back to the whole config
    let m = e.message();
    m.split('`').nth(1).unwrap_or("config").to_string()
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    let mut f = fs::File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

/// Record of one command invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    /// Absent when the configuration itself failed to resolve.
    pub config: Option<GrainConfig>,
    pub version: String,
    pub seed: u64,
    pub started_at: String,
    pub finished_at: String,
    pub exit_code: i32,
    /// sha256 of every input file, keyed by path.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn digest_inputs<'a>(paths: impl IntoIterator<Item = &'a Path>) -> std::io::Result<BTreeMap<String, String>> {
        paths.into_iter().map(|p| Ok((p.display().to_string(), sha256_file(p)?))).collect()
    }

    pub fn write(&self, path: &Path) -> Result<(), ConfigError> {
        let tmp = path.with_extension("json.tmp");
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&tmp, text + "\n").map_err(|e| ConfigError::Io(tmp.clone(), e))?;
        fs::rename(&tmp, path).map_err(|e| ConfigError::Io(path.to_path_buf(), e))
    }

    pub fn read(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError::Io(path.to_path_buf(), e))?;
        serde_json::from_str(&text).map_err(|e| ConfigError::Parse { path: path.to_path_buf(), message: e.to_string() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kv(k: &str, v: &str) -> (String, String) {
        (k.to_string(), v.to_string())
    }

    #[test]
    fn cli_beats_file() {
        let file: Table = toml::from_str("[train]\nbatch_size = 8\nepochs = 3").unwrap();
        let c = resolve_config(Some(&file), &[kv("train.batch_size", "16")], &[]).unwrap();
        assert_eq!((c.train.batch_size, c.train.epochs), (16, 3));
    }

    #[test]
    fn precedence_order() {
        let file: Table = toml::from_str("[train]\nseed = 1").unwrap();
        let env = [kv("GRAIN_TRAIN_SEED", "2")];
        assert_eq!(resolve_config(Some(&file), &[], &env).unwrap().train.seed, 2);
        assert_eq!(resolve_config(Some(&file), &[kv("train.seed", "3")], &env).unwrap().train.seed, 3);
        assert_eq!(resolve_config(Some(&file), &[], &[]).unwrap().train.seed, 1);
    }

    #[test]
    fn unknown_keys_named() {
        let file: Table = toml::from_str("[train]\nbtch_size = 8").unwrap();
        let e = resolve_config(Some(&file), &[], &[]).unwrap_err();
        assert!(e.to_string().contains("train.btch_size"), "{e}");
        let e = resolve_config(None, &[kv("train.model.depth", "3")], &[]).unwrap_err();
        assert!(e.to_string().contains("train.model.depth"), "{e}");
        let e = resolve_config(None, &[], &[kv("GRAIN_TRAIN_BTCH", "3")]).unwrap_err();
        assert!(e.to_string().contains("GRAIN_TRAIN_BTCH"), "{e}");
    }

    #[test]
    fn defaults_without_file() {
        assert_eq!(resolve_config(None, &[], &[]).unwrap(), GrainConfig::default());
        let tiny = resolve_config(None, &[kv("preset", "\"tiny\"")], &[]).unwrap();
        assert_eq!(tiny.train, TrainConfig::tiny());
        let tiny = resolve_config(None, &[kv("preset", "tiny")], &[]).unwrap();
        assert_eq!(tiny.preset, Preset::Tiny);
    }

    #[test]
    fn optional_keys_and_types() {
        let c = resolve_config(None, &[kv("train.warmup_steps", "10"), kv("train.peak_lr", "1")], &[]).unwrap();
        assert_eq!((c.train.warmup_steps, c.train.peak_lr), (Some(10), 1.0));
        let e = resolve_config(None, &[kv("train.batch_size", "many")], &[]).unwrap_err();
        assert!(matches!(e, ConfigError::Invalid { .. }), "{e}");
    }
}
