use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::kernel::AdamConfig;
use crate::model::{InitMode, ModelConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    ExtractEdit,
    BackTranslation,
    MleRetrain,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::ExtractEdit => "extract-edit",
            Mode::BackTranslation => "back-translation",
            Mode::MleRetrain => "mle-retrain",
        }
    }
}

/// Every knob of a training run. Serializes to a flat key/value map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub mode: Mode,
    pub omega_lm: f64,
    pub omega_com: f64,
    pub lambda: f64,
    pub k: usize,
    pub batch_size: usize,
    /// Sentences per direction that enter the comparative loss each step.
    pub com_batch: usize,
    pub lr: f64,
    pub lr_eval: f64,
    /// Steps between embedding-index rebuilds.
    pub episode: u64,
    pub pretrain_steps: u64,
    /// Steps of the main phase after pretraining.
    pub steps: u64,
    pub p_drop: f64,
    pub shuffle_window: usize,
    pub max_len: usize,
    pub hidden: usize,
    pub layers: usize,
    pub r_hidden: Vec<usize>,
    pub r_out: usize,
    pub init: InitMode,
    /// Restrict greedy decoding to tokens seen in the output language's corpus.
    pub restrict_decode: bool,
    /// Main-phase steps between validation scores; 0 scores only at phase ends.
    pub valid_interval: u64,
    /// Validation sentences per direction used for the selection score; 0 uses all.
    pub valid_size: usize,
    /// Bitwise check that each alternating update leaves the other group untouched.
    pub audit: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 1,
            mode: Mode::ExtractEdit,
            omega_lm: 1.0,
            omega_com: 1.0,
            lambda: 0.5,
            k: 10,
            batch_size: 32,
            com_batch: 32,
            lr: 3e-4,
            lr_eval: 3e-4,
            episode: 50,
            pretrain_steps: 2000,
            steps: 3000,
            p_drop: 0.1,
            shuffle_window: 3,
            max_len: 20,
            hidden: 64,
            layers: 2,
            r_hidden: vec![64, 64],
            r_out: 64,
            init: InitMode::Random,
            restrict_decode: true,
            valid_interval: 500,
            valid_size: 0,
            audit: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if !(self.omega_lm >= 0.0 && self.omega_com >= 0.0) {
            return fail("loss weights must be non-negative");
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return fail("lambda must be positive");
        }
        if self.k == 0 {
            return fail("k must be at least 1");
        }
        if self.batch_size == 0 || self.com_batch == 0 || self.com_batch > self.batch_size {
            return fail("need 1 <= com_batch <= batch_size");
        }
        if !(self.lr > 0.0 && self.lr_eval > 0.0) {
            return fail("learning rates must be positive");
        }
        if self.episode == 0 {
            return fail("episode must be at least 1");
        }
        if !(0.0..1.0).contains(&self.p_drop) {
            return fail("p_drop must lie in [0, 1)");
        }
        if self.max_len == 0 {
            return fail("max_len must be at least 1");
        }
        Ok(())
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            hidden: self.hidden,
            layers: self.layers,
            r_hidden: self.r_hidden.clone(),
            r_out: self.r_out,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }

    pub fn adam_eval(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr_eval,
            ..AdamConfig::default()
        }
    }

    /// Sets one field from its text form. Lists are comma-separated.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        set_key(self, key, raw)
    }

    /// `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        apply_flat_text(self, text)
    }

    /// Flat `key = value` rendering that [`TrainConfig::apply_text`] reads back.
    pub fn to_text(&self) -> String {
        flat_text(self)
    }
}

fn object<T: Serialize>(value: &T) -> Map<String, Value> {
    match serde_json::to_value(value) {
        Ok(Value::Object(m)) => m,
        _ => unreachable!("flat configs serialize to objects"),
    }
}

/// Sets field `key` of any flat serde struct from its text form.
pub fn set_key<T: Serialize + DeserializeOwned>(target: &mut T, key: &str, raw: &str) -> Result<()> {
    let mut map = object(target);
    let slot = map
        .get(key)
        .ok_or_else(|| Error::Config(format!("unknown key {key:?}")))?;
    let value = parse_like(slot, raw).ok_or_else(|| Error::Config(format!("bad value {raw:?} for {key}")))?;
    map.insert(key.to_string(), value);
    *target = serde_json::from_value(Value::Object(map)).map_err(|e| Error::Config(format!("{key}: {e}")))?;
    Ok(())
}

/// Applies `key = value` lines; `#` starts a comment.
pub fn apply_flat_text<T: Serialize + DeserializeOwned>(target: &mut T, text: &str) -> Result<()> {
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
        set_key(target, k.trim(), v.trim())?;
    }
    Ok(())
}

/// One `key = value` line per field, in key order.
pub fn flat_text<T: Serialize>(value: &T) -> String {
    let mut out = String::new();
    for (k, v) in object(value) {
        out.push_str(&format!("{k} = {}\n", render(&v)));
    }
    out
}

/// Field names of a flat serde struct.
pub fn flat_keys<T: Serialize>(value: &T) -> Vec<String> {
    object(value).keys().cloned().collect()
}

fn render(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Array(items) => items.iter().map(render).collect::<Vec<_>>().join(","),
        other => other.to_string(),
    }
}

/// Parses `raw` into the JSON type of `like`.
fn parse_like(like: &Value, raw: &str) -> Option<Value> {
    match like {
        Value::String(_) => Some(Value::String(raw.to_string())),
        Value::Bool(_) => raw.parse::<bool>().ok().map(Value::Bool),
        Value::Number(_) => serde_json::from_str::<Value>(raw).ok().filter(Value::is_number),
        Value::Array(items) => {
            let elem = items.first().cloned().unwrap_or(Value::from(0));
            if raw.trim().is_empty() {
                return Some(Value::Array(Vec::new()));
            }
            raw.split(',')
                .map(|p| parse_like(&elem, p.trim()))
                .collect::<Option<Vec<_>>>()
                .map(Value::Array)
        }
        _ => None,
    }
}
