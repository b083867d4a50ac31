//! Run configuration: a JSON file merged with command-line overrides.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::eval::EvalConfig;
use crate::trainer::TrainConfig;

pub const DEFAULT_SPLIT_SEED: u64 = 0;
pub const DEFAULT_HELDOUT_FRACTION: f64 = 0.2;

const REQUIRED: [&str; 2] = ["corpus", "output"];
const OPTIONAL: [&str; 4] = ["split_seed", "heldout_fraction", "train", "eval"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Directory written by `prep`.
    pub corpus: PathBuf,
    /// Directory for checkpoints, logs and metrics.
    pub output: PathBuf,
    #[serde(default = "default_split_seed")]
    pub split_seed: u64,
    #[serde(default = "default_heldout_fraction")]
    pub heldout_fraction: f64,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn default_split_seed() -> u64 {
    DEFAULT_SPLIT_SEED
}

fn default_heldout_fraction() -> f64 {
    DEFAULT_HELDOUT_FRACTION
}

#[derive(Debug, thiserror::Error)]
#[error("invalid run configuration:\n  {}", .0.join("\n  "))]
pub struct ConfigErrors(pub Vec<String>);

/// A dotted key (`train.epochs`) and the value to place there.
pub type Override = (&'static str, Value);

/// Reads `path` (or starts from an empty object), applies `overrides`, and
/// checks the result. Every unknown key, missing required key, type error
/// and out-of-range value is reported in one error.
pub fn resolve(path: Option<&Path>, overrides: Vec<Override>) -> Result<RunConfig, ConfigErrors> {
    let mut root = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| ConfigErrors(vec![format!("{}: {e}", p.display())]))?;
            serde_json::from_str::<Value>(&text).map_err(|e| ConfigErrors(vec![format!("{}: {e}", p.display())]))?
        }
        None => Value::Object(Map::new()),
    };
    let Value::Object(obj) = &mut root else {
        return Err(ConfigErrors(vec!["top level must be a JSON object".into()]));
    };
    let mut problems = Vec::new();
    for (key, value) in overrides {
        match key.split_once('.') {
            None => {
                obj.insert(key.to_string(), value);
            }
            Some((section, field)) => {
                let entry = obj.entry(section.to_string()).or_insert_with(|| Value::Object(Map::new()));
                match entry {
                    Value::Object(m) => {
                        m.insert(field.to_string(), value);
                    }
                    _ => problems.push(format!("{section} must be an object")),
                }
            }
        }
    }

    let known: BTreeSet<&str> = REQUIRED.iter().chain(&OPTIONAL).copied().collect();
    for key in obj.keys() {
        if !known.contains(key.as_str()) {
            problems.push(format!("unknown key {key:?}"));
        }
    }
    for key in REQUIRED {
        if !obj.contains_key(key) {
            problems.push(format!("missing required key {key:?}"));
        }
    }
    check_section(obj, "train", &TrainConfig::default(), &mut problems);
    check_section(obj, "eval", &EvalConfig::default(), &mut problems);
    if !problems.is_empty() {
        return Err(ConfigErrors(problems));
    }

    let cfg: RunConfig = serde_json::from_value(root).map_err(|e| ConfigErrors(vec![e.to_string()]))?;
    let mut problems: Vec<String> = cfg.train.problems().into_iter().map(|p| format!("train: {p}")).collect();
    problems.extend(cfg.eval.problems().into_iter().map(|p| format!("eval: {p}")));
    if !(cfg.heldout_fraction > 0.0 && cfg.heldout_fraction < 1.0) {
        problems.push(format!("heldout_fraction must lie in (0, 1), got {}", cfg.heldout_fraction));
    }
    if problems.is_empty() {
        Ok(cfg)
    } else {
        Err(ConfigErrors(problems))
    }
}

/// Flags unknown keys of one section and values that do not deserialize
/// into the field type of the defaults.
fn check_section<T: Serialize + for<'de> Deserialize<'de>>(
    obj: &Map<String, Value>,
    section: &str,
    defaults: &T,
    problems: &mut Vec<String>,
) {
    let Some(value) = obj.get(section) else {
        return;
    };
    let Value::Object(fields) = value else {
        problems.push(format!("{section} must be an object"));
        return;
    };
    let Value::Object(default_fields) = serde_json::to_value(defaults).expect("defaults serialize") else {
        unreachable!("config sections serialize to objects");
    };
    for (key, v) in fields {
        if !default_fields.contains_key(key) {
            problems.push(format!("unknown key \"{section}.{key}\""));
            continue;
        }
        let mut probe = Map::new();
        probe.insert(key.clone(), v.clone());
        if let Err(e) = serde_json::from_value::<T>(Value::Object(probe)) {
            problems.push(format!("{section}.{key}: {e}"));
        }
    }
}

/// `paper15` or a comma-separated list of widths.
pub fn parse_layer_widths(s: &str) -> Result<Vec<usize>, String> {
    if s.trim().eq_ignore_ascii_case("paper15") {
        return Ok(crate::trainer::PAPER15.to_vec());
    }
    s.split(',')
        .map(|w| w.trim().parse::<usize>().map_err(|e| format!("bad layer width {w:?}: {e}")))
        .collect()
}
