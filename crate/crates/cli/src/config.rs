//! Run configuration: one JSON document with a section per subsystem, plus
//! `--key value` overrides from the command line.
//!
//! Override keys are either dotted (`train.lr`) or bare (`lr`). A bare key
//! must name a field in exactly one section. A flag given without a value is
//! read as `true`.

use std::fs;
use std::path::{Path, PathBuf};

use ctxssl_core::eval::ProbeConfig;
use ctxssl_core::train::TrainConfig;
use ctxssl_core::{MaskConfig, ModelConfig, WorldConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const SECTIONS: [&str; 7] = [
    "world", "model", "train", "mask", "probe", "paths", "ablate",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub out_dir: PathBuf,
    /// World file; defaults to `<out_dir>/world.bin`.
    pub world: Option<PathBuf>,
    /// Checkpoint manifest; defaults to `<out_dir>/checkpoint.json`.
    pub checkpoint: Option<PathBuf>,
    /// Also keep a numbered checkpoint every this many steps (0 disables).
    pub checkpoint_every: u64,
    pub svg: bool,
    pub dump_mask: bool,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            out_dir: PathBuf::from("runs/default"),
            world: None,
            checkpoint: None,
            checkpoint_every: 0,
            svg: true,
            dump_mask: true,
        }
    }
}

impl PathsConfig {
    pub fn world_file(&self) -> PathBuf {
        self.world
            .clone()
            .unwrap_or_else(|| self.out_dir.join("world.bin"))
    }

    pub fn checkpoint_file(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.out_dir.join("checkpoint.json"))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxes {
    P,
    Lambda,
    #[default]
    Both,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub sweep: SweepAxes,
    pub p_grid: Vec<f64>,
    /// Auxiliary weights to sweep; empty means `{0, train.lambda}`.
    pub lambda_grid: Vec<f64>,
    /// Seeds per grid point; empty means just `train.seed`.
    pub seeds: Vec<u64>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            sweep: SweepAxes::Both,
            p_grid: vec![0.0, 0.2, 0.5, 0.75, 0.9, 0.98],
            lambda_grid: Vec::new(),
            seeds: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub mask: MaskConfig,
    pub probe: ProbeConfig,
    pub paths: PathsConfig,
    pub ablate: AblateConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<RunConfig> {
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        RunConfig::from_json(&text)
    }

    /// Reads `path` and applies `overrides` (flags win over the file).
    pub fn resolve(path: &Path, overrides: &[(String, String)]) -> Result<RunConfig> {
        let base = RunConfig::load(path)?;
        base.with_overrides(overrides)
    }

    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<RunConfig> {
        let mut doc = serde_json::to_value(self).map_err(|e| CliError::Other(e.to_string()))?;
        for (key, raw) in overrides {
            apply_override(&mut doc, key, raw)?;
        }
        let cfg: RunConfig = serde_json::from_value(doc)
            .map_err(|e| CliError::Config(format!("invalid override: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.mask
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.probe.validate()?;
        if self.ablate.p_grid.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(CliError::Config(
                "ablate.p_grid values must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hash of everything that determines a trained model: world, model,
    /// training and mask settings. Probe, path and sweep settings are excluded.
    pub fn training_hash(&self) -> String {
        let doc = serde_json::json!({
            "world": self.world,
            "model": self.model,
            "train": self.train,
            "mask": self.mask,
        });
        sha256_hex(
            serde_json::to_string(&doc)
                .expect("config serializes")
                .as_bytes(),
        )
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Splits `--key value`, `--key=value` and bare `--flag` tokens.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < args.len() {
        let tok = &args[i];
        let Some(body) = tok.strip_prefix("--") else {
            return Err(CliError::Config(format!("expected --key, found `{tok}`")));
        };
        if body.is_empty() {
            return Err(CliError::Config("empty override key".into()));
        }
        if let Some((k, v)) = body.split_once('=') {
            out.push((k.to_string(), v.to_string()));
            i += 1;
        } else if i + 1 < args.len() && !looks_like_key(&args[i + 1]) {
            out.push((body.to_string(), args[i + 1].clone()));
            i += 2;
        } else {
            out.push((body.to_string(), "true".to_string()));
            i += 1;
        }
    }
    Ok(out)
}

fn looks_like_key(tok: &str) -> bool {
    tok.strip_prefix("--")
        .is_some_and(|r| r.starts_with(|c: char| c.is_ascii_alphabetic()))
}

fn apply_override(doc: &mut Value, key: &str, raw: &str) -> Result<()> {
    let key = key.replace('-', "_");
    let root = doc.as_object_mut().expect("config is an object");
    let (section, field) = match key.split_once('.') {
        Some((s, f)) => (s.to_string(), f.to_string()),
        None => {
            let owners: Vec<&str> = SECTIONS
                .iter()
                .copied()
                .filter(|s| {
                    root.get(*s)
                        .and_then(Value::as_object)
                        .is_some_and(|m| m.contains_key(&key))
                })
                .collect();
            match owners.as_slice() {
                [one] => (one.to_string(), key.clone()),
                [] => return Err(CliError::Config(format!("unknown key `{key}`"))),
                many => {
                    return Err(CliError::Config(format!(
                        "key `{key}` is ambiguous; use one of {}",
                        many.iter()
                            .map(|s| format!("{s}.{key}"))
                            .collect::<Vec<_>>()
                            .join(", ")
                    )))
                }
            }
        }
    };
    let map: &mut Map<String, Value> = root
        .get_mut(&section)
        .and_then(Value::as_object_mut)
        .ok_or_else(|| CliError::Config(format!("unknown section `{section}`")))?;
    let slot = map
        .get_mut(&field)
        .ok_or_else(|| CliError::Config(format!("unknown key `{section}.{field}`")))?;
    *slot = coerce(slot, raw);
    Ok(())
}

/// Parses `raw` as JSON when possible, else as a string. List fields also
/// accept a comma-separated list or a single element.
fn coerce(current: &Value, raw: &str) -> Value {
    let parsed =
        serde_json::from_str::<Value>(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    match (current, &parsed) {
        (Value::Array(_), Value::Array(_)) => parsed,
        (Value::Array(_), _) => Value::Array(
            raw.split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| {
                    serde_json::from_str(s.trim())
                        .unwrap_or_else(|_| Value::String(s.trim().to_string()))
                })
                .collect(),
        ),
        (Value::String(_) | Value::Null, Value::Number(_) | Value::Bool(_)) => {
            Value::String(raw.to_string())
        }
        _ => parsed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn override_forms() {
        let o = parse_overrides(&args(&[
            "--train.lr",
            "0.01",
            "--steps=7",
            "--resume",
            "--lengths",
            "0,2",
        ]))
        .unwrap();
        assert_eq!(o[0], ("train.lr".into(), "0.01".into()));
        assert_eq!(o[1], ("steps".into(), "7".into()));
        assert_eq!(o[2], ("resume".into(), "true".into()));
        let cfg = RunConfig::default().with_overrides(&o[..2]).unwrap();
        assert_eq!(cfg.train.lr, 0.01);
        assert_eq!(cfg.train.steps, 7);
        let cfg = RunConfig::default().with_overrides(&o[3..]).unwrap();
        assert_eq!(cfg.probe.lengths, vec![0, 2]);
    }

    #[test]
    fn negative_values_are_values() {
        let o =
            parse_overrides(&args(&["--world.seed", "3", "--train.weight_decay", "-0"])).unwrap();
        assert_eq!(o[1].1, "-0");
    }

    #[test]
    fn single_length_and_enum() {
        let o =
            parse_overrides(&args(&["--lengths", "0", "--mode", "invariant_baseline"])).unwrap();
        let cfg = RunConfig::default().with_overrides(&o).unwrap();
        assert_eq!(cfg.probe.lengths, vec![0]);
        assert_eq!(
            cfg.train.mode,
            ctxssl_core::train::TrainMode::InvariantBaseline
        );
    }

    #[test]
    fn ambiguous_and_unknown_keys() {
        let amb = RunConfig::default().with_overrides(&[("seed".into(), "1".into())]);
        assert!(matches!(amb, Err(CliError::Config(m)) if m.contains("ambiguous")));
        let unk = RunConfig::default().with_overrides(&[("train.nope".into(), "1".into())]);
        assert!(matches!(unk, Err(CliError::Config(_))));
        assert!(RunConfig::from_json(r#"{"train": {"nope": 1}}"#).is_err());
    }

    #[test]
    fn out_dir_accepts_numeric_looking_path() {
        let cfg = RunConfig::default()
            .with_overrides(&[("out_dir".into(), "123".into())])
            .unwrap();
        assert_eq!(cfg.paths.out_dir, PathBuf::from("123"));
    }

    #[test]
    fn training_hash_ignores_probe_settings() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.probe.lengths = vec![0];
        assert_eq!(a.training_hash(), b.training_hash());
        b.train.lr = 1.0;
        assert_ne!(a.training_hash(), b.training_hash());
    }
}
