//! Loading a run configuration from TOML with command-line overrides.

use std::path::Path;

use anyhow::{bail, Context, Result};
use cascade_core::experiment::RunConfig;
use sha2::{Digest, Sha256};

/// Parses `key.path=value`; the value is read as a TOML literal and falls back
/// to a bare string.
pub fn parse_override(s: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, raw) = s.split_once('=').with_context(|| format!("override `{s}` is not of the form key=value"))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_owned).collect();
    if path.iter().any(String::is_empty) {
        bail!("override `{s}` has an empty key segment");
    }
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.trim().to_owned()),
    };
    Ok((path, value))
}

fn apply(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for seg in parents {
        let entry = cur.entry(seg.clone()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => bail!("`{}` is not a table", path.join(".")),
        };
    }
    cur.insert(last.clone(), value);
    Ok(())
}

/// Reads `path` (or starts from defaults), applies overrides and validates.
pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<RunConfig> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            toml::from_str::<toml::Table>(&text).with_context(|| format!("parsing config {}", p.display()))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        let (k, v) = parse_override(o)?;
        apply(&mut table, &k, v)?;
    }
    let mut cfg: RunConfig = toml::Value::Table(table).try_into().context("invalid configuration")?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate().context("invalid configuration")?;
    Ok(cfg)
}

pub fn to_toml(cfg: &RunConfig) -> Result<String> {
    Ok(toml::to_string_pretty(cfg)?)
}

/// SHA-256 of the canonical JSON form of the resolved configuration.
pub fn hash(cfg: &RunConfig) -> Result<String> {
    let json = serde_json::to_vec(cfg)?;
    Ok(hex::encode(Sha256::digest(&json)))
}
