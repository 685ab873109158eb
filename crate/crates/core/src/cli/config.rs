use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::bench::BenchConfig;
use crate::data::DatasetConfig;
use crate::error::{Error, Result};
use crate::training::TrainConfig;
use crate::transformer::ModelConfig;

pub const SEED_ENV: &str = "SMART_SEED";

/// Everything a command needs. The top-level `seed` is copied into the
/// model, training and dataset seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Directory holding `scenes.jsonl` (plus word vectors and lexicon for
    /// synthetic data).
    pub data_dir: PathBuf,
    pub run_dir: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub dataset: DatasetConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data_dir: PathBuf::from("data/synthetic"),
            run_dir: PathBuf::from("runs/default"),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            dataset: DatasetConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

/// Top-level fields that can be overridden without a section prefix.
const TOP_LEVEL: [&str; 3] = ["seed", "data_dir", "run_dir"];

/// `(dotted key, raw value)` pairs taken from the command line.
pub type Overrides = Vec<(String, String)>;

/// Parses `--a.b.c=value` or `--a.b.c value` pairs (plus the top-level
/// fields) out of `args`, leaving all other arguments in order.
pub fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Overrides)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(body) = a.strip_prefix("--") else {
            rest.push(a);
            continue;
        };
        let (key, value) = match body.split_once('=') {
            Some((k, v)) => (k.to_string(), Some(v.to_string())),
            None => (body.to_string(), None),
        };
        if !key.contains('.') && !TOP_LEVEL.contains(&key.as_str()) {
            rest.push(a);
            continue;
        }
        let value = match value {
            Some(v) => v,
            None => it
                .next()
                .ok_or_else(|| Error::Usage(format!("override --{key} needs a value")))?,
        };
        overrides.push((key, value));
    }
    Ok((rest, overrides))
}

fn set_path(root: &mut Value, key: &str, raw: &str) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, p) in parts.iter().enumerate() {
        let obj = cur.as_object_mut().ok_or_else(|| {
            Error::config(key, format!("`{}` is not a section", parts[..i].join(".")))
        })?;
        if !obj.contains_key(*p) {
            return Err(Error::config(key, "unknown field"));
        }
        cur = obj.get_mut(*p).expect("checked above");
    }
    // numbers, booleans and JSON literals parse as such; anything else is a string
    *cur = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

fn field_of(err: &serde_json::Error) -> String {
    let msg = err.to_string();
    msg.split('`').nth(1).unwrap_or("config").to_string()
}

/// Layers defaults, then the config file, then dotted overrides, then the
/// seed environment variable.
pub fn load_run_config(
    file: Option<&Path>,
    overrides: &[(String, String)],
    env_seed: Option<String>,
) -> Result<RunConfig> {
    let mut value = serde_json::to_value(RunConfig::default()).expect("defaults serialize");
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parsed: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Config {
            field: field_of(&e),
            msg: format!("{}: {e}", path.display()),
        })?;
        value = serde_json::to_value(parsed).expect("config serializes");
    }
    for (k, v) in overrides {
        set_path(&mut value, k, v)?;
    }
    let mut cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::Config {
        field: field_of(&e),
        msg: e.to_string(),
    })?;
    if let Some(s) = env_seed {
        cfg.seed = s
            .trim()
            .parse()
            .map_err(|_| Error::config(SEED_ENV, format!("{s:?} is not an unsigned integer")))?;
    }
    cfg.train.seed = cfg.seed;
    cfg.dataset.seed = cfg.seed;
    cfg.bench.seed = cfg.seed;
    cfg.model.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

pub fn write_config(path: &Path, cfg: &RunConfig) -> Result<()> {
    let text = serde_json::to_string_pretty(cfg).expect("config serializes") + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
