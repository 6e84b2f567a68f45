//! Flat `key=value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key has a
//! default and unknown keys are rejected. The effective configuration is
//! serialized into each output artifact.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::pref_math::Beta;
use crate::scene_world::{World, WorldConfig};
use crate::trainer::TrainConfig;
use crate::vocab::Vocab;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub dataset_size: usize,
    pub dataset_seed: u64,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub dataset_path: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            dataset_size: 500,
            dataset_seed: 7,
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            dataset_path: PathBuf::from("pairs.jsonl"),
            out_dir: PathBuf::from("run"),
        }
    }
}

pub const KEYS: [&str; 21] = [
    "grid_size",
    "min_objects",
    "max_objects",
    "num_categories",
    "dataset_size",
    "dataset_seed",
    "beta",
    "learning_rate",
    "steps",
    "batch_size",
    "seed",
    "strategy",
    "fixed_weight",
    "init_std",
    "eval_scenes",
    "eval_seed",
    "probes_per_scene",
    "max_decode_len",
    "dataset_path",
    "out_dir",
    "vocab_size",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

impl RunConfig {
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", i + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse_str(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "grid_size" => self.world.grid_size = parse(key, value)?,
            "min_objects" => self.world.min_objects = parse(key, value)?,
            "max_objects" => self.world.max_objects = parse(key, value)?,
            "num_categories" => self.world.num_categories = parse(key, value)?,
            "dataset_size" => self.dataset_size = parse(key, value)?,
            "dataset_seed" => self.dataset_seed = parse(key, value)?,
            "beta" => self.train.beta = Beta::new(parse(key, value)?).map_err(|e| Error::Config(e.to_string()))?,
            "learning_rate" => self.train.learning_rate = parse(key, value)?,
            "steps" => self.train.steps = parse(key, value)?,
            "batch_size" => self.train.batch_size = parse(key, value)?,
            "seed" => self.train.seed = parse(key, value)?,
            "strategy" => self.train.strategy = value.parse()?,
            "fixed_weight" => self.train.fixed_weight = parse(key, value)?,
            "init_std" => self.train.init_std = parse(key, value)?,
            "eval_scenes" => self.eval.scenes = parse(key, value)?,
            "eval_seed" => self.eval.seed = parse(key, value)?,
            "probes_per_scene" => self.eval.probes_per_scene = parse(key, value)?,
            "max_decode_len" => self.eval.max_decode_len = parse(key, value)?,
            "dataset_path" => self.dataset_path = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "vocab_size" => {
                let v: usize = parse(key, value)?;
                if v != Vocab::default().len() {
                    return Err(Error::Config(format!("only the built-in {}-token vocabulary is supported", Vocab::default().len())));
                }
            }
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate(&Vocab::default())?;
        self.train.validate()?;
        if self.dataset_size == 0 {
            return Err(Error::Config("dataset_size must be at least 1".into()));
        }
        if self.eval.scenes == 0 || self.eval.probes_per_scene == 0 || self.eval.max_decode_len == 0 {
            return Err(Error::Config("eval_scenes, probes_per_scene and max_decode_len must be at least 1".into()));
        }
        Ok(())
    }

    pub fn build_world(&self) -> Result<World> {
        World::new(Vocab::default(), self.world.clone())
    }

    /// Resolved configuration as `key=value` lines, in [`KEYS`] order.
    pub fn to_kv_lines(&self) -> Vec<String> {
        let t = &self.train;
        let values = [
            self.world.grid_size.to_string(),
            self.world.min_objects.to_string(),
            self.world.max_objects.to_string(),
            self.world.num_categories.to_string(),
            self.dataset_size.to_string(),
            self.dataset_seed.to_string(),
            t.beta.value().to_string(),
            t.learning_rate.to_string(),
            t.steps.to_string(),
            t.batch_size.to_string(),
            t.seed.to_string(),
            t.strategy.to_string(),
            t.fixed_weight.to_string(),
            t.init_std.to_string(),
            self.eval.scenes.to_string(),
            self.eval.seed.to_string(),
            self.eval.probes_per_scene.to_string(),
            self.eval.max_decode_len.to_string(),
            self.dataset_path.display().to_string(),
            self.out_dir.display().to_string(),
            Vocab::default().len().to_string(),
        ];
        KEYS.iter().zip(values).map(|(k, v)| format!("{k}={v}")).collect()
    }

    pub fn to_kv_string(&self) -> String {
        let mut out = String::new();
        for line in self.to_kv_lines() {
            let _ = writeln!(out, "{line}");
        }
        out
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
