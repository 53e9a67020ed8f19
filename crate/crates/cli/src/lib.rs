//! Run configuration for the `crtnet` tool.
//!
//! A config file holds flat `key = value` lines under the `model.`, `train.`
//! and `data.` namespaces, with `#` starting a comment. Command-line flags
//! are applied on top of the file and the merged result is validated as a
//! whole before a command does any work.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crtnet::model::ModelConfig;
use crtnet::synth::{default_roster, ConditionTag, DatasetConfig, SceneConfig};
use crtnet::train::TrainConfig;
use crtnet::{Error, Result};

/// Name of the effective-config echo written next to every run's outputs.
pub const RUN_CONFIG_FILE: &str = "run.cfg";

const NAMESPACES: [&str; 3] = ["model.", "train.", "data."];

/// Parses config text into a key map. Duplicate keys, keys outside the known
/// namespaces and lines without `=` are errors naming the line.
pub fn parse_config(text: &str, source_name: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let fail = |detail: String| Error::Parse {
            source_name: source_name.to_string(),
            line: line_no,
            detail,
        };
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| fail(format!("expected 'key = value', got '{line}'")))?;
        let (key, value) = (key.trim(), value.trim());
        check_key(key)
            .map_err(|_| fail(format!("key '{key}' is outside model., train. and data.")))?;
        if value.is_empty() {
            return Err(fail(format!("'{key}' has no value")));
        }
        if out.insert(key.to_string(), value.to_string()).is_some() {
            return Err(fail(format!("'{key}' is set twice")));
        }
    }
    Ok(out)
}

fn check_key(key: &str) -> Result<()> {
    if NAMESPACES
        .iter()
        .any(|ns| key.strip_prefix(ns).is_some_and(|f| !f.is_empty()))
    {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "key '{key}' is outside model., train. and data."
        )))
    }
}

/// Splits a `key=value` override.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{s}' is not key=value")))?;
    let (k, v) = (k.trim(), v.trim());
    check_key(k)?;
    Ok((k.to_string(), v.to_string()))
}

/// `normal=100,gravity=50` into per-condition counts, in the given order.
pub fn parse_counts(s: &str) -> Result<Vec<(ConditionTag, usize)>> {
    s.split(',')
        .map(|part| {
            let (c, n) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("count '{part}' is not condition=number")))?;
            let c: ConditionTag = c.trim().parse()?;
            let n = n.trim().parse().map_err(|_| {
                Error::Config(format!("count for '{c}' is not a number: '{}'", n.trim()))
            })?;
            Ok((c, n))
        })
        .collect()
}

fn format_counts(counts: &[(ConditionTag, usize)]) -> String {
    counts
        .iter()
        .map(|(c, n)| format!("{c}={n}"))
        .collect::<Vec<_>>()
        .join(",")
}

/// Everything a run depends on.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub scene: SceneConfig,
    pub dataset: DatasetConfig,
    /// Master seed for dataset generation.
    pub data_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            scene: SceneConfig::default(),
            dataset: DatasetConfig::default(),
            data_seed: 7,
        }
    }
}

impl RunConfig {
    /// Defaults, then the file, then `overrides` in order; validated.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.to_path_buf(),
                source: e,
            })?;
            cfg.apply(&parse_config(&text, &path.display().to_string())?)?;
        }
        for (k, v) in overrides {
            check_key(k)?;
            cfg.apply(&BTreeMap::from([(k.clone(), v.clone())]))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, kv: &BTreeMap<String, String>) -> Result<()> {
        self.model.apply_kv(kv)?;
        self.train.apply_kv(kv)?;
        for (key, value) in kv {
            let Some(field) = key.strip_prefix("data.") else {
                continue;
            };
            let s = &mut self.scene;
            match field {
                "seed" => self.data_seed = num(key, value)?,
                "train_count" => self.dataset.train_count = num(key, value)?,
                "test_counts" => self.dataset.test_counts = parse_counts(value)?,
                "image_side" => s.image_side = num(key, value)?,
                "lift_fraction" => s.lift_fraction = num(key, value)?,
                "center_jitter" => s.center_jitter = num(key, value)?,
                "small_threshold" => s.small_threshold = num(key, value)?,
                "support_fidelity" => s.support_fidelity = num(key, value)?,
                "room_cue_prob" => s.room_cue_prob = num(key, value)?,
                "distractors" => s.distractors = num(key, value)?,
                "max_attempts" => s.max_attempts = num(key, value)?,
                _ => return Err(Error::Config(format!("unknown key '{key}'"))),
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.scene.validate()?;
        self.dataset.validate()?;
        let classes = default_roster().len();
        if self.model.num_classes != classes {
            return Err(Error::Config(format!(
                "model.num_classes is {} but the scene roster has {classes} classes",
                self.model.num_classes
            )));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let s = &self.scene;
        let data = [
            ("seed", self.data_seed.to_string()),
            ("train_count", self.dataset.train_count.to_string()),
            ("test_counts", format_counts(&self.dataset.test_counts)),
            ("image_side", s.image_side.to_string()),
            ("lift_fraction", s.lift_fraction.to_string()),
            ("center_jitter", s.center_jitter.to_string()),
            ("small_threshold", s.small_threshold.to_string()),
            ("support_fidelity", s.support_fidelity.to_string()),
            ("room_cue_prob", s.room_cue_prob.to_string()),
            ("distractors", s.distractors.to_string()),
            ("max_attempts", s.max_attempts.to_string()),
        ];
        let mut kv = self.model.to_kv();
        kv.extend(self.train.to_kv());
        kv.extend(data.into_iter().map(|(k, v)| (format!("data.{k}"), v)));
        kv
    }

    /// Config-file text that resolves back to `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# effective configuration\n");
        for (k, v) in self.to_kv() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(RUN_CONFIG_FILE);
        fs::create_dir_all(dir)
            .and_then(|_| fs::write(&path, self.to_text()))
            .map_err(|e| Error::Io { path, source: e })
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse {key} = '{value}'")))
}
