//! Run configuration: preset selection, overrides and config files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::Error;
use crate::experiments::presets::{preset, Preset, Variant};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "FLEXGATE_OUT";

/// Contents of a configuration file.
///
/// ```toml
/// preset = "main"
/// seeds = [0, 1, 2]
/// out = "results/main"
/// workers = 2
/// control = false
///
/// [params]
/// tau_c = 0.05
/// n_blocks = 10
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub preset: Option<String>,
    pub seeds: Option<SeedSpec>,
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
    /// Run the control column of the preset.
    pub control: Option<bool>,
    #[serde(default)]
    pub params: BTreeMap<String, Value>,
}

/// A seed count (seeds `0..n`) or an explicit list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SeedSpec {
    Count(u64),
    List(Vec<u64>),
}

impl SeedSpec {
    pub fn seeds(&self) -> Vec<u64> {
        match self {
            SeedSpec::Count(n) => (0..*n).collect(),
            SeedSpec::List(v) => v.clone(),
        }
    }
}

pub fn read_config_file(path: &Path) -> Result<ConfigFile, Error> {
    let text = std::fs::read_to_string(path)?;
    let value: toml::Value =
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let json = serde_json::to_value(value).map_err(|e| Error::Config(e.to_string()))?;
    serde_json::from_value(json).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Parses `key=value`.
pub fn parse_assignment(s: &str) -> Result<(String, String), Error> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("expected key=value, got '{s}'")))?;
    let k = k.trim();
    if k.is_empty() {
        return Err(Error::Config(format!("empty key in '{s}'")));
    }
    Ok((k.to_string(), v.trim().to_string()))
}

/// Interprets a command-line string according to the type of the value it
/// replaces.
fn coerce(key: &str, raw: &str, current: &Value) -> Result<Value, Error> {
    let bad = |what: &str| Error::Config(format!("cannot parse '{raw}' as {what} for '{key}'"));
    Ok(match current {
        Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| bad("a boolean"))?),
        Value::Number(n) if n.is_u64() => Value::from(raw.parse::<u64>().map_err(|_| bad("an integer"))?),
        Value::Number(_) => {
            let v: f64 = raw.parse().map_err(|_| bad("a number"))?;
            serde_json::Number::from_f64(v)
                .map(Value::Number)
                .ok_or_else(|| bad("a finite number"))?
        }
        Value::String(_) => Value::String(raw.to_string()),
        Value::Array(_) => {
            let trimmed = raw.trim();
            if trimmed.starts_with('[') {
                serde_json::from_str(trimmed).map_err(|_| bad("a list"))?
            } else {
                let items: Result<Vec<Value>, Error> = trimmed
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| {
                        let v: f64 = s.trim().parse().map_err(|_| bad("a list of numbers"))?;
                        serde_json::Number::from_f64(v)
                            .map(Value::Number)
                            .ok_or_else(|| bad("a list of finite numbers"))
                    })
                    .collect();
                Value::Array(items?)
            }
        }
        _ => serde_json::from_str(raw).map_err(|_| bad("JSON"))?,
    })
}

/// Applies typed overrides (from a config file) and string overrides (from
/// the command line, applied last). Unknown keys are rejected.
pub fn apply_overrides(
    base: &Preset,
    typed: &BTreeMap<String, Value>,
    strings: &[(String, String)],
) -> Result<Preset, Error> {
    let mut v = serde_json::to_value(base)?;
    let obj = v.as_object_mut().expect("preset serialises to an object");
    for (k, val) in typed {
        if !obj.contains_key(k) || k == "name" {
            return Err(Error::Config(format!("unknown parameter '{k}'")));
        }
        obj.insert(k.clone(), val.clone());
    }
    for (k, raw) in strings {
        let Some(cur) = obj.get(k) else {
            return Err(Error::Config(format!("unknown parameter '{k}'")));
        };
        if k == "name" {
            return Err(Error::Config("the preset name cannot be overridden".into()));
        }
        let new = coerce(k, raw, cur)?;
        obj.insert(k.clone(), new);
    }
    let p: Preset = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
    p.validate()?;
    Ok(p)
}

/// Everything a command needs after merging file, flags and environment.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedConfig {
    pub preset: Preset,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub workers: Option<usize>,
    pub variant: Variant,
}

/// Command-line level inputs, before merging.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CliInputs {
    pub preset: Option<String>,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub seeds: Option<u64>,
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
    pub set: Vec<String>,
    pub control: bool,
}

/// Merges defaults, config file and flags; flags win over the file.
///
/// `default_preset` is used when neither names one; `out_env` is the value
/// of [`OUT_ENV`], used as output root when no `--out` is given.
pub fn parse_config(
    cli: &CliInputs,
    default_preset: &str,
    command: &str,
    out_env: Option<&str>,
) -> Result<ResolvedConfig, Error> {
    let file = match &cli.config {
        Some(p) => read_config_file(p)?,
        None => ConfigFile::default(),
    };
    let name = cli
        .preset
        .clone()
        .or(file.preset.clone())
        .unwrap_or_else(|| default_preset.to_string());
    let base = preset(&name)?;
    let strings: Vec<(String, String)> = cli
        .set
        .iter()
        .map(|s| parse_assignment(s))
        .collect::<Result<_, _>>()?;
    let resolved = apply_overrides(&base, &file.params, &strings)?;
    let seeds = if let Some(s) = cli.seed {
        vec![s]
    } else if let Some(n) = cli.seeds {
        (0..n).collect()
    } else if let Some(s) = &file.seeds {
        s.seeds()
    } else {
        (0..resolved.seeds as u64).collect()
    };
    if seeds.is_empty() {
        return Err(Error::Config("no seeds selected".into()));
    }
    let out = cli.out.clone().or(file.out.clone()).unwrap_or_else(|| {
        let root = out_env.map(PathBuf::from).unwrap_or_else(|| PathBuf::from("results"));
        root.join(format!("{command}-{name}"))
    });
    Ok(ResolvedConfig {
        preset: resolved,
        seeds,
        out,
        workers: cli.workers.or(file.workers),
        variant: if cli.control || file.control.unwrap_or(false) {
            Variant::Control
        } else {
            Variant::Main
        },
    })
}

/// The fully resolved configuration as a config file. Passing it back with
/// `--config` reproduces the run.
pub fn echo_config(resolved: &ResolvedConfig) -> Result<String, Error> {
    let mut params: BTreeMap<String, Value> = match serde_json::to_value(&resolved.preset)? {
        Value::Object(m) => m.into_iter().collect(),
        _ => unreachable!("preset serialises to an object"),
    };
    params.remove("name");
    let file = ConfigFile {
        preset: Some(resolved.preset.name.clone()),
        seeds: Some(SeedSpec::List(resolved.seeds.clone())),
        out: None,
        workers: None,
        control: Some(resolved.variant == Variant::Control),
        params,
    };
    toml::to_string(&file).map_err(|e| Error::Config(e.to_string()))
}
