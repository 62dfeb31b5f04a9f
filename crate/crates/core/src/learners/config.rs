//! `key = value` training configuration.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, ENCODER_LAYERS};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Mtl,
    Proto,
    Leopard,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Mtl => "mtl",
            Method::Proto => "proto",
            Method::Leopard => "leopard",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mtl" => Ok(Method::Mtl),
            "proto" => Ok(Method::Proto),
            "leopard" => Ok(Method::Leopard),
            _ => Err(Error::Config(format!("unknown method {s:?}, expected mtl|proto|leopard"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EarlyStop {
    /// Keep the epoch with the best mean accuracy over dev-task test sets.
    DevAccuracy,
    /// Keep the last epoch.
    None,
}

impl FromStr for EarlyStop {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dev_accuracy" => Ok(EarlyStop::DevAccuracy),
            "none" => Ok(EarlyStop::None),
            _ => Err(Error::Config(format!("unknown early_stop_metric {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub seed: u64,
    pub d_model: usize,
    pub window: usize,
    pub max_len: usize,
    /// Adam learning rate (outer rate for LEOPARD).
    pub lr: f64,
    pub inner_lr: f64,
    pub inner_steps: usize,
    pub nu: usize,
    pub temperature: f64,
    pub epochs: usize,
    pub early_stop_metric: EarlyStop,
    /// Scenes per minibatch.
    pub batch_size: usize,
    /// Minibatches (or episodes) per optimizer step.
    pub accumulate: usize,
    pub support_batches: usize,
    pub query_batch: usize,
    /// LEOPARD head input width.
    pub head_width: usize,
    pub generator_hidden: usize,
    pub first_order: bool,
    pub vocab_min_count: usize,
    pub vocab_max_words: Option<usize>,
    /// Proto checkpoint whose encoder initializes LEOPARD.
    pub init_from: Option<String>,
}

impl TrainConfig {
    /// Defaults for `method`; learning rate and epochs follow the method.
    pub fn new(method: Method) -> Self {
        let (lr, epochs, accumulate) = match method {
            Method::Mtl | Method::Proto => (2e-5, 20, 8),
            Method::Leopard => (1e-5, 10, 1),
        };
        TrainConfig {
            method,
            seed: 0,
            d_model: 64,
            window: 256,
            max_len: 2000,
            lr,
            inner_lr: 1e-2,
            inner_steps: 5,
            nu: 1,
            temperature: 0.1,
            epochs,
            early_stop_metric: EarlyStop::DevAccuracy,
            batch_size: 8,
            accumulate,
            support_batches: 5,
            query_batch: 8,
            head_width: 32,
            generator_hidden: 64,
            first_order: true,
            vocab_min_count: 1,
            vocab_max_words: None,
            init_from: None,
        }
    }

    /// Settings for small CPU-only runs on generated corpora: a randomly
    /// initialized encoder needs far larger steps than a pretrained one, and
    /// a handful of tasks cannot fill eight-way gradient accumulation.
    pub fn desk_scale(method: Method) -> Self {
        let mut c = TrainConfig::new(method);
        c.d_model = 32;
        c.accumulate = 1;
        match method {
            Method::Mtl | Method::Proto => {
                c.lr = 3e-3;
                c.epochs = 12;
            }
            Method::Leopard => {
                c.lr = 1e-3;
                c.epochs = 4;
                c.head_width = 16;
                c.generator_hidden = 32;
                c.inner_lr = 0.1;
            }
        }
        c
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            d_model: self.d_model,
            window: self.window,
            max_len: self.max_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(m.to_string()));
        if self.d_model == 0 || self.window == 0 || self.max_len == 0 {
            return err("d_model, window and max_len must be positive");
        }
        if self.batch_size == 0 || self.accumulate == 0 || self.query_batch == 0 || self.support_batches == 0 {
            return err("batch_size, accumulate, query_batch and support_batches must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.inner_lr >= 0.0 && self.inner_lr.is_finite()) {
            return err("learning rates must be finite, lr positive");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return err("temperature must be positive");
        }
        if self.nu > ENCODER_LAYERS {
            return Err(Error::Config(format!("nu must be at most {ENCODER_LAYERS}")));
        }
        if self.head_width == 0 || self.generator_hidden == 0 {
            return err("head_width and generator_hidden must be positive");
        }
        if !self.first_order {
            return err("second-order adaptation is not supported; set first_order = true");
        }
        Ok(())
    }

    /// Parses a config file. `method` must appear; every other key is
    /// optional and overrides the method's default.
    pub fn parse(text: &str) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        let method = pairs
            .iter()
            .find(|(_, k, _)| k == "method")
            .ok_or_else(|| Error::Config("missing key \"method\"".into()))?
            .2
            .parse()?;
        TrainConfig::new(method).with_overrides(text)
    }

    /// Applies the `key = value` lines of `text` on top of `self`. A
    /// `method` key, if present, must name the same method.
    pub fn with_overrides(mut self, text: &str) -> Result<Self> {
        for (line, k, v) in parse_pairs(text)? {
            if k == "method" {
                let m: Method = v.parse()?;
                if m != self.method {
                    return Err(Error::Config(format!("line {line}: method {m} conflicts with {}", self.method)));
                }
                continue;
            }
            self.set(&k, &v)
                .map_err(|e| Error::Config(format!("line {line}: {e}")))?;
        }
        self.validate()?;
        Ok(self)
    }

    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("bad value {v:?} for {key}"))
        }
        match key {
            "method" => {}
            "seed" => self.seed = num(key, value)?,
            "d_model" => self.d_model = num(key, value)?,
            "window" => self.window = num(key, value)?,
            "max_len" => self.max_len = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "inner_lr" => self.inner_lr = num(key, value)?,
            "inner_steps" => self.inner_steps = num(key, value)?,
            "nu" => self.nu = num(key, value)?,
            "temperature" => self.temperature = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "early_stop_metric" => self.early_stop_metric = value.parse().map_err(|e: Error| e.to_string())?,
            "batch_size" => self.batch_size = num(key, value)?,
            "accumulate" => self.accumulate = num(key, value)?,
            "support_batches" => self.support_batches = num(key, value)?,
            "query_batch" => self.query_batch = num(key, value)?,
            "head_width" => self.head_width = num(key, value)?,
            "generator_hidden" => self.generator_hidden = num(key, value)?,
            "first_order" => self.first_order = num(key, value)?,
            "vocab_min_count" => self.vocab_min_count = num(key, value)?,
            "vocab_max_words" => self.vocab_max_words = Some(num(key, value)?),
            "init_from" => self.init_from = Some(value.to_string()),
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }
}

fn parse_pairs(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut pairs = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if !seen.insert(k.to_string()) {
            return Err(Error::Config(format!("line {}: duplicate key {k:?}", i + 1)));
        }
        pairs.push((i + 1, k.to_string(), v.to_string()));
    }
    Ok(pairs)
}
