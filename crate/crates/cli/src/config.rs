//! Run configuration: a TOML file plus `--override dot.path=value` pairs,
//! resolved into one typed structure that is echoed before every command.

use std::path::{Path, PathBuf};

use duostream::model::ModelConfig;
use duostream::schedule::SchedulerKind;
use duostream::synthgen::SynthSpec;
use duostream::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::exit::{Failure, Kind};

pub const SEED_ENV: &str = "DUOSTREAM_SEED";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub seg_manifest: Option<PathBuf>,
    /// Defaults to the segmentation manifest when absent.
    pub rec_manifest: Option<PathBuf>,
    pub val_manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffuseConfig {
    pub steps: usize,
    pub kind: SchedulerKind,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for DiffuseConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            kind: SchedulerKind::Cosine,
            beta_min: 1e-4,
            beta_max: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub workers: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub synth: SynthSpec,
    pub diffuse: DiffuseConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            workers: 1,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            synth: SynthSpec::default(),
            diffuse: DiffuseConfig::default(),
        }
    }
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string.
fn parse_value(raw: &str) -> Value {
    let doc = format!("v = {raw}");
    match doc.parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.into())),
        Err(_) => Value::String(raw.into()),
    }
}

fn apply_override(table: &mut Table, spec: &str) -> Result<(), Failure> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Failure::new(Kind::Usage, format!("override `{spec}` is not of the form key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Failure::new(Kind::Usage, format!("override `{spec}` has an empty key")));
    }
    let mut cur = table;
    for k in &keys[..keys.len() - 1] {
        let entry = cur.entry(k.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Failure::new(Kind::Usage, format!("override `{path}`: `{k}` is not a table")))?;
    }
    cur.insert(keys[keys.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Loads `path` (if any), applies overrides in order and resolves the seed:
/// explicit flag, then config, then `DUOSTREAM_SEED`, then 0.
pub fn resolve(path: Option<&Path>, overrides: &[String], seed_flag: Option<u64>) -> Result<RunConfig, Failure> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Failure::new(Kind::Usage, format!("cannot read config {}: {e}", p.display())))?;
            text.parse::<Table>()
                .map_err(|e| Failure::new(Kind::Usage, format!("invalid config {}: {e}", p.display())))?
        }
        None => Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let train_seed = table
        .get("train")
        .and_then(Value::as_table)
        .and_then(|t| t.get("seed"))
        .cloned();
    let mut cfg: RunConfig = serde_path_to_error::deserialize(Value::Table(table)).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner().to_string();
        let first = inner.lines().next().unwrap_or_default().to_string();
        Failure::new(Kind::Usage, format!("config key `{path}`: {first}"))
    })?;
    let env_seed = match std::env::var(SEED_ENV) {
        Ok(v) => Some(
            v.trim()
                .parse::<u64>()
                .map_err(|_| Failure::new(Kind::Usage, format!("{SEED_ENV}={v} is not an unsigned integer")))?,
        ),
        Err(_) => None,
    };
    // `train.seed` is accepted as an alias so an echoed config can be fed back.
    let config_seed = match (cfg.seed, train_seed.map(|_| cfg.train.seed)) {
        (Some(a), Some(b)) if a != b => {
            return Err(Failure::new(Kind::Usage, format!("`seed` = {a} conflicts with `train.seed` = {b}")));
        }
        (a, b) => a.or(b),
    };
    let seed = seed_flag.or(config_seed).or(env_seed).unwrap_or(0);
    cfg.seed = Some(seed);
    cfg.train.seed = seed;
    if cfg.workers == 0 {
        return Err(Failure::new(Kind::Usage, "workers must be ≥ 1"));
    }
    Ok(cfg)
}

/// Prints the fully resolved configuration.
pub fn echo(cfg: &RunConfig) {
    match toml::to_string(cfg) {
        Ok(text) => {
            println!("# effective config");
            for line in text.lines() {
                println!("#   {line}");
            }
        }
        Err(e) => log::warn!("could not render effective config: {e}"),
    }
}
