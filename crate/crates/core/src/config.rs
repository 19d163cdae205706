//! Run configuration: one JSON document with a section per stage, resolved from defaults,
//! an optional file and dotted `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::alignment::LampConfig;
use crate::captioner::CaptionerConfig;
use crate::corpus::SynthConfig;
use crate::generator::{GenerationConfig, T2MConfig};
use crate::metrics::EvalConfig;
use crate::nn::OptimConfig;
use crate::vq::VqConfig;
use crate::{seed, Error, Result};

pub const RESOLVED_FILE: &str = "config.resolved.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalConfig {
    pub k: usize,
    pub rerank_matching: bool,
    pub rerank_top: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self { k: 10, rerank_matching: false, rerank_top: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub log_level: String,
    pub synth: SynthConfig,
    pub vq: VqConfig,
    pub lamp: LampConfig,
    pub t2m: T2MConfig,
    /// Sampling settings for generation.
    pub generator: GenerationConfig,
    pub m2t: CaptionerConfig,
    pub retrieval: RetrievalConfig,
    pub eval: EvalConfig,
}

/// Sized to finish on a few CPU cores: 2,048 training and 256 test samples, and reduced
/// model widths and step counts.
impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            log_level: "info".into(),
            synth: SynthConfig { num_samples: 2304, num_test: 256, ..Default::default() },
            vq: VqConfig {
                iterations: 2000,
                optim: OptimConfig { lr: 1e-3, warmup: 100, ..Default::default() },
                ..Default::default()
            },
            lamp: LampConfig {
                layers: 2,
                hidden: 64,
                ffn_mult: 2,
                iterations: 1000,
                optim: OptimConfig { lr: 5e-4, warmup: 100, ..Default::default() },
                ..Default::default()
            },
            t2m: T2MConfig {
                layers: 2,
                hidden: 64,
                ffn_mult: 2,
                max_len: 16,
                iterations: 1500,
                optim: OptimConfig { lr: 5e-4, warmup: 100, ..Default::default() },
                ..Default::default()
            },
            generator: GenerationConfig { length: 16, ..Default::default() },
            m2t: CaptionerConfig {
                layers: 2,
                hidden: 64,
                ffn_mult: 2,
                iterations: 800,
                optim: OptimConfig { lr: 1e-3, warmup: 50, ..Default::default() },
                ..Default::default()
            },
            retrieval: RetrievalConfig::default(),
            eval: EvalConfig { repeats: 2, texts_per_sample: Some(1), ..Default::default() },
        }
    }
}

/// Sections whose `seed` is derived from the global seed unless set explicitly.
const SEEDED: [&str; 6] = ["synth", "vq", "lamp", "t2m", "m2t", "eval"];

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.vq.validate()?;
        self.lamp.validate()?;
        self.t2m.validate()?;
        self.generator.validate()?;
        self.m2t.validate()?;
        self.eval.validate()?;
        if self.retrieval.k == 0 {
            return Err(Error::Config("retrieval.k must be >= 1".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_FILE);
        std::fs::write(&path, self.to_json()? + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// Copies `patch` into `base`, rejecting keys that `base` does not have. Keys whose
/// default is `null` (optional values) accept anything.
fn merge(base: &mut Value, patch: &Value, path: &str) -> Result<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let full = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                let slot = b.get_mut(k).ok_or_else(|| Error::UnknownKey(full.clone()))?;
                merge(slot, v, &full)?;
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v.clone();
            Ok(())
        }
    }
}

/// Parses `a.b.c=value` into a nested object. The value is read as JSON when it parses,
/// otherwise as a string.
pub fn parse_override(spec: &str) -> Result<(Vec<String>, Value)> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not of the form key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(Error::Config(format!("override `{spec}` has an empty key segment")));
    }
    let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((path, value))
}

fn nest(path: &[String], value: Value) -> Value {
    path.iter().rev().fold(value, |acc, k| {
        let mut m = Map::new();
        m.insert(k.clone(), acc);
        Value::Object(m)
    })
}

fn explicit_seed(layers: &[&Value], section: &str) -> bool {
    layers.iter().any(|v| v.get(section).and_then(|s| s.get("seed")).is_some())
}

/// Defaults ← file ← overrides, in that order. Stage seeds not given explicitly are
/// derived from the global seed and the stage name.
pub fn resolve_config(file: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut value = serde_json::to_value(RunConfig::default())?;
    let file_value = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            if text.trim().is_empty() {
                Value::Object(Map::new())
            } else {
                let v: Value = serde_json::from_str(&text)?;
                if !v.is_object() {
                    return Err(Error::Config(format!("{} must hold a JSON object", path.display())));
                }
                v
            }
        }
        None => Value::Object(Map::new()),
    };
    merge(&mut value, &file_value, "")?;
    let mut patches = Vec::with_capacity(overrides.len());
    for o in overrides {
        let (path, v) = parse_override(o)?;
        let patch = nest(&path, v);
        merge(&mut value, &patch, "").map_err(|e| match e {
            Error::UnknownKey(_) => Error::UnknownKey(path.join(".")),
            other => other,
        })?;
        patches.push(patch);
    }
    let mut config: RunConfig =
        serde_json::from_value(value).map_err(|e| Error::Config(format!("type mismatch: {e}")))?;
    let layers: Vec<&Value> = std::iter::once(&file_value).chain(patches.iter()).collect();
    let global = config.seed;
    for section in SEEDED {
        if explicit_seed(&layers, section) {
            continue;
        }
        let derived = seed::derive(global, section);
        match section {
            "synth" => config.synth.seed = derived,
            "vq" => config.vq.seed = derived,
            "lamp" => config.lamp.seed = derived,
            "t2m" => config.t2m.seed = derived,
            "m2t" => config.m2t.seed = derived,
            "eval" => config.eval.seed = derived,
            _ => unreachable!("listed in SEEDED"),
        }
    }
    if !explicit_seed(&layers, "generator") {
        config.generator.seed = seed::derive(global, "generator");
    }
    config.validate()?;
    Ok(config)
}
