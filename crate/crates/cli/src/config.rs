//! Flat `key=value` run configuration.

use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use sessrec::dataset::{parse_fraction, FilterConfig, SplitMode, SynthConfig};
use sessrec::evaluation::EvalConfig;
use sessrec::model::{HeadKind, ModelConfig};
use sessrec::tensor::AdamConfig;
use sessrec::training::{DistillConfig, TrainConfig};
use sessrec::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub seed: u64,
    pub fraction: f64,

    pub embed_dim: usize,
    pub gru_units: usize,
    pub hidden_dense_units: Option<usize>,
    pub window: usize,
    pub embed_dropout_rate: f64,

    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub validation_fraction: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,

    pub lambda: f64,
    pub temperature: f64,
    pub cache_teacher: bool,
    pub freeze_input_embedding: bool,

    pub k: usize,
    pub eval_batch_size: usize,
    pub bench_batches: usize,
    pub bench_repetitions: usize,

    pub min_session_length: usize,
    pub min_item_support: usize,
    pub split: SplitMode,

    pub n_items: usize,
    pub n_sessions: usize,
    pub day_count: u32,
    pub branching: usize,
    pub shift_at: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let d = DistillConfig::default();
        let e = EvalConfig::default();
        let f = FilterConfig::default();
        let s = SynthConfig::default();
        RunConfig {
            data: None,
            seed: 0,
            fraction: 1.0,
            embed_dim: 50,
            gru_units: 100,
            hidden_dense_units: None,
            window: 19,
            embed_dropout_rate: 0.25,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            early_stop_patience: t.early_stop_patience,
            validation_fraction: t.validation_fraction,
            learning_rate: t.adam.learning_rate,
            beta1: t.adam.beta1,
            beta2: t.adam.beta2,
            epsilon: t.adam.epsilon,
            lambda: d.lambda,
            temperature: d.temperature,
            cache_teacher: d.cache_teacher,
            freeze_input_embedding: false,
            k: e.k,
            eval_batch_size: e.batch_size,
            bench_batches: 10,
            bench_repetitions: 5,
            min_session_length: f.min_session_length,
            min_item_support: f.min_item_support,
            split: f.split,
            n_items: s.n_items,
            n_sessions: s.n_sessions,
            day_count: s.day_count,
            branching: s.branching,
            shift_at: s.shift_at,
        }
    }
}

fn parse<T: FromStr>(key: &str, raw: &str) -> Result<T>
where
    T::Err: Display,
{
    raw.trim()
        .parse()
        .map_err(|e| Error::config(format!("{key}: cannot parse {raw:?}: {e}")))
}

fn optional<T: FromStr>(key: &str, raw: &str) -> Result<Option<T>>
where
    T::Err: Display,
{
    match raw.trim() {
        "" | "none" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

fn show<T: Display>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), T::to_string)
}

fn split_name(s: SplitMode) -> &'static str {
    match s {
        SplitMode::LastDay => "last-day",
        SplitMode::None => "none",
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        match key {
            "data" => self.data = optional(key, raw)?,
            "seed" => self.seed = parse(key, raw)?,
            "fraction" => self.fraction = parse_fraction(raw)?,
            "embed_dim" => self.embed_dim = parse(key, raw)?,
            "gru_units" => self.gru_units = parse(key, raw)?,
            "hidden_dense_units" => self.hidden_dense_units = optional(key, raw)?,
            "window" => self.window = parse(key, raw)?,
            "embed_dropout_rate" => self.embed_dropout_rate = parse(key, raw)?,
            "batch_size" => self.batch_size = parse(key, raw)?,
            "max_epochs" => self.max_epochs = parse(key, raw)?,
            "early_stop_patience" => self.early_stop_patience = parse(key, raw)?,
            "validation_fraction" => self.validation_fraction = parse(key, raw)?,
            "learning_rate" => self.learning_rate = parse(key, raw)?,
            "beta1" => self.beta1 = parse(key, raw)?,
            "beta2" => self.beta2 = parse(key, raw)?,
            "epsilon" => self.epsilon = parse(key, raw)?,
            "lambda" => self.lambda = parse(key, raw)?,
            "temperature" => self.temperature = parse(key, raw)?,
            "cache_teacher" => self.cache_teacher = parse(key, raw)?,
            "freeze_input_embedding" => self.freeze_input_embedding = parse(key, raw)?,
            "k" => self.k = parse(key, raw)?,
            "eval_batch_size" => self.eval_batch_size = parse(key, raw)?,
            "bench_batches" => self.bench_batches = parse(key, raw)?,
            "bench_repetitions" => self.bench_repetitions = parse(key, raw)?,
            "min_session_length" => self.min_session_length = parse(key, raw)?,
            "min_item_support" => self.min_item_support = parse(key, raw)?,
            "split" => {
                self.split = match raw.trim() {
                    "last-day" => SplitMode::LastDay,
                    "none" => SplitMode::None,
                    other => return Err(Error::config(format!("split: expected last-day or none, got {other:?}"))),
                }
            }
            "n_items" => self.n_items = parse(key, raw)?,
            "n_sessions" => self.n_sessions = parse(key, raw)?,
            "day_count" => self.day_count = parse(key, raw)?,
            "branching" => self.branching = parse(key, raw)?,
            "shift_at" => self.shift_at = optional(key, raw)?,
            other => return Err(Error::config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("config line {}: expected key=value", i + 1)))?;
            self.set(k.trim(), v).map_err(|e| match e {
                Error::Config(msg) => Error::config(format!("config line {}: {msg}", i + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("data", show(&self.data.as_ref().map(|p| p.display()))),
            ("seed", self.seed.to_string()),
            ("fraction", self.fraction.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("gru_units", self.gru_units.to_string()),
            ("hidden_dense_units", show(&self.hidden_dense_units)),
            ("window", self.window.to_string()),
            ("embed_dropout_rate", self.embed_dropout_rate.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("max_epochs", self.max_epochs.to_string()),
            ("early_stop_patience", self.early_stop_patience.to_string()),
            ("validation_fraction", self.validation_fraction.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("epsilon", self.epsilon.to_string()),
            ("lambda", self.lambda.to_string()),
            ("temperature", self.temperature.to_string()),
            ("cache_teacher", self.cache_teacher.to_string()),
            ("freeze_input_embedding", self.freeze_input_embedding.to_string()),
            ("k", self.k.to_string()),
            ("eval_batch_size", self.eval_batch_size.to_string()),
            ("bench_batches", self.bench_batches.to_string()),
            ("bench_repetitions", self.bench_repetitions.to_string()),
            ("min_session_length", self.min_session_length.to_string()),
            ("min_item_support", self.min_item_support.to_string()),
            ("split", split_name(self.split).to_string()),
            ("n_items", self.n_items.to_string()),
            ("n_sessions", self.n_sessions.to_string()),
            ("day_count", self.day_count.to_string()),
            ("branching", self.branching.to_string()),
            ("shift_at", show(&self.shift_at)),
        ]
    }

    pub fn to_text(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    pub fn model_config(&self, vocab_size_with_pad: usize, head: HeadKind) -> ModelConfig {
        let mut cfg = match head {
            HeadKind::Softmax => ModelConfig::softmax(vocab_size_with_pad, self.embed_dim, self.gru_units),
            HeadKind::Embedding => ModelConfig::embedding(vocab_size_with_pad, self.embed_dim, self.gru_units),
        };
        if head == HeadKind::Embedding && self.hidden_dense_units.is_some() {
            cfg.hidden_dense_units = self.hidden_dense_units;
        }
        cfg.window = self.window;
        cfg.embed_dropout_rate = self.embed_dropout_rate;
        cfg
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            early_stop_patience: self.early_stop_patience,
            validation_fraction: self.validation_fraction,
            adam: AdamConfig {
                learning_rate: self.learning_rate,
                beta1: self.beta1,
                beta2: self.beta2,
                epsilon: self.epsilon,
                step_count: 0,
            },
            seed: self.seed,
        }
    }

    pub fn distill_config(&self) -> DistillConfig {
        DistillConfig {
            lambda: self.lambda,
            temperature: self.temperature,
            cache_teacher: self.cache_teacher,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            k: self.k,
            batch_size: self.eval_batch_size,
        }
    }

    pub fn filter_config(&self) -> FilterConfig {
        FilterConfig {
            min_session_length: self.min_session_length,
            min_item_support: self.min_item_support,
            split: self.split,
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            n_items: self.n_items,
            n_sessions: self.n_sessions,
            day_count: self.day_count,
            branching: self.branching,
            shift_at: self.shift_at,
            ..SynthConfig::default()
        }
    }
}
