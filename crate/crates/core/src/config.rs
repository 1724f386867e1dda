//! Run configuration: flat `key = value` files with `#` comments, overridden
//! by repeatable `--set key=value` flags. Unknown keys are rejected. Every
//! command writes a resolved snapshot sufficient to reproduce the run.

use std::fmt;

use crate::objectives::{DiversityMode, LossConfig};

#[derive(Clone, Debug, PartialEq)]
pub enum ConfigError {
    UnknownKey { key: String },
    BadValue { key: String, value: String, expected: &'static str },
    MissingEquals { line: usize },
    Invalid { message: String },
    MissingKey { key: &'static str, needed_for: &'static str },
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::UnknownKey { key } => write!(f, "unknown config key '{key}'"),
            ConfigError::BadValue { key, value, expected } => {
                write!(f, "config key '{key}': cannot parse '{value}' as {expected}")
            }
            ConfigError::MissingEquals { line } => {
                write!(f, "config line {line}: expected 'key = value'")
            }
            ConfigError::Invalid { message } => write!(f, "invalid config: {message}"),
            ConfigError::MissingKey { key, needed_for } => {
                write!(f, "config key '{key}' is required for {needed_for}")
            }
        }
    }
}

impl std::error::Error for ConfigError {}

pub type ConfigResult<T> = Result<T, ConfigError>;

/// Model and optimization hyperparameters. Defaults follow the reference
/// training setup; the smaller values used by the test suite are explicit
/// overrides.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Number of attention heads per stream.
    pub k: usize,
    /// Shared embedding dimension (token states, head outputs). Even.
    pub h: usize,
    /// Word-embedding width.
    pub d_w: usize,
    /// Visual feature width.
    pub d_v: usize,
    /// Maximum sentence length after truncation.
    pub max_len: usize,
    /// Maximum number of visual objects per image.
    pub max_objects: usize,
    /// Ranking margin (alpha).
    pub alpha: f64,
    /// Diversity margin (alpha_D).
    pub alpha_d: f64,
    /// Diversity weight (beta).
    pub beta: f64,
    /// Sentence-sentence ranking weight (gamma).
    pub gamma: f64,
    pub batch: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Learning rate after the switch epoch.
    pub lr_after: f64,
    /// Epoch index (0-based) at which the learning rate drops.
    pub lr_switch_epoch: usize,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
    pub diversity_mode: DiversityMode,
    pub seed: u64,
    /// Minimum token frequency for vocabulary inclusion.
    pub min_count: usize,
    /// Keep pretrained embeddings fixed during training.
    pub freeze_embeddings: bool,
    /// Use decoupled weight decay instead of coupled L2.
    pub decoupled_weight_decay: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            k: 3,
            h: 512,
            d_w: 300,
            d_v: 2048,
            max_len: 100,
            max_objects: 36,
            alpha: 0.2,
            alpha_d: 0.1,
            beta: 1.0,
            gamma: 0.6,
            batch: 128,
            epochs: 20,
            lr: 2e-4,
            lr_after: 2e-5,
            lr_switch_epoch: 15,
            weight_decay: 1e-6,
            clip_norm: 2.0,
            diversity_mode: DiversityMode::Intent,
            seed: 0,
            min_count: 1,
            freeze_embeddings: false,
            decoupled_weight_decay: false,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str, expected: &'static str) -> ConfigResult<T> {
    value.parse().map_err(|_| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        expected,
    })
}

fn parse_bool(key: &str, value: &str) -> ConfigResult<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(ConfigError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
            expected: "bool",
        }),
    }
}

impl RunConfig {
    /// Apply one key/value pair. Returns false if the key is not a
    /// RunConfig key (the caller may route it elsewhere).
    pub fn apply(&mut self, key: &str, value: &str) -> ConfigResult<bool> {
        match key {
            "k" => self.k = parse_num(key, value, "usize")?,
            "h" => self.h = parse_num(key, value, "usize")?,
            "d_w" => self.d_w = parse_num(key, value, "usize")?,
            "d_v" => self.d_v = parse_num(key, value, "usize")?,
            "max_len" => self.max_len = parse_num(key, value, "usize")?,
            "max_objects" => self.max_objects = parse_num(key, value, "usize")?,
            "alpha" => self.alpha = parse_num(key, value, "float")?,
            "alpha_d" => self.alpha_d = parse_num(key, value, "float")?,
            "beta" => self.beta = parse_num(key, value, "float")?,
            "gamma" => self.gamma = parse_num(key, value, "float")?,
            "batch" => self.batch = parse_num(key, value, "usize")?,
            "epochs" => self.epochs = parse_num(key, value, "usize")?,
            "lr" => self.lr = parse_num(key, value, "float")?,
            "lr_after" => self.lr_after = parse_num(key, value, "float")?,
            "lr_switch_epoch" => self.lr_switch_epoch = parse_num(key, value, "usize")?,
            "weight_decay" => self.weight_decay = parse_num(key, value, "float")?,
            "clip_norm" => self.clip_norm = parse_num(key, value, "float")?,
            "diversity_mode" => {
                self.diversity_mode =
                    DiversityMode::parse(value).ok_or_else(|| ConfigError::BadValue {
                        key: key.to_string(),
                        value: value.to_string(),
                        expected: "'literal' or 'intent'",
                    })?
            }
            "seed" => self.seed = parse_num(key, value, "u64")?,
            "min_count" => self.min_count = parse_num(key, value, "usize")?,
            "freeze_embeddings" => self.freeze_embeddings = parse_bool(key, value)?,
            "decoupled_weight_decay" => self.decoupled_weight_decay = parse_bool(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn validate(&self) -> ConfigResult<()> {
        let fail = |message: String| Err(ConfigError::Invalid { message });
        if self.k == 0 {
            return fail("k must be at least 1".into());
        }
        if self.h == 0 || self.h % 2 != 0 {
            return fail(format!("h must be positive and even, got {}", self.h));
        }
        if !(self.alpha > 0.0 && self.alpha < 2.0) {
            return fail(format!("alpha must lie in (0, 2), got {}", self.alpha));
        }
        if !(self.alpha_d > 0.0 && self.alpha_d < 2.0) {
            return fail(format!("alpha_d must lie in (0, 2), got {}", self.alpha_d));
        }
        if self.batch < 2 {
            return fail(format!("batch must be at least 2, got {}", self.batch));
        }
        if self.lr <= 0.0 || self.lr_after <= 0.0 {
            return fail("learning rates must be positive".into());
        }
        if self.clip_norm <= 0.0 {
            return fail("clip_norm must be positive".into());
        }
        if self.d_w == 0 || self.d_v == 0 || self.max_len == 0 || self.max_objects == 0 {
            return fail("dimensions must be positive".into());
        }
        if self.min_count == 0 {
            return fail("min_count must be at least 1".into());
        }
        Ok(())
    }

    /// Canonical key/value serialization; parses back exactly (floats use
    /// the shortest round-trip decimal form).
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("k".into(), self.k.to_string()),
            ("h".into(), self.h.to_string()),
            ("d_w".into(), self.d_w.to_string()),
            ("d_v".into(), self.d_v.to_string()),
            ("max_len".into(), self.max_len.to_string()),
            ("max_objects".into(), self.max_objects.to_string()),
            ("alpha".into(), self.alpha.to_string()),
            ("alpha_d".into(), self.alpha_d.to_string()),
            ("beta".into(), self.beta.to_string()),
            ("gamma".into(), self.gamma.to_string()),
            ("batch".into(), self.batch.to_string()),
            ("epochs".into(), self.epochs.to_string()),
            ("lr".into(), self.lr.to_string()),
            ("lr_after".into(), self.lr_after.to_string()),
            ("lr_switch_epoch".into(), self.lr_switch_epoch.to_string()),
            ("weight_decay".into(), self.weight_decay.to_string()),
            ("clip_norm".into(), self.clip_norm.to_string()),
            ("diversity_mode".into(), self.diversity_mode.as_str().into()),
            ("seed".into(), self.seed.to_string()),
            ("min_count".into(), self.min_count.to_string()),
            ("freeze_embeddings".into(), self.freeze_embeddings.to_string()),
            (
                "decoupled_weight_decay".into(),
                self.decoupled_weight_decay.to_string(),
            ),
        ]
    }

    pub fn from_pairs(pairs: &[(String, String)]) -> ConfigResult<Self> {
        let mut cfg = RunConfig::default();
        for (k, v) in pairs {
            if !cfg.apply(k, v)? {
                return Err(ConfigError::UnknownKey { key: k.clone() });
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Learning rate for a 0-based epoch index.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        if epoch < self.lr_switch_epoch {
            self.lr
        } else {
            self.lr_after
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            margin: self.alpha,
            gamma: self.gamma,
            diversity_margin: self.alpha_d,
            beta: self.beta,
            mode: self.diversity_mode,
        }
    }
}

/// Data-file locations and command-specific settings that accompany a
/// RunConfig in the same flat file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct JobConfig {
    pub run: RunConfig,
    pub features: Option<String>,
    pub captions_a: Option<String>,
    pub captions_b: Option<String>,
    pub split_train: Option<String>,
    pub split_val: Option<String>,
    pub split_test: Option<String>,
    pub checkpoint: Option<String>,
    pub sts: Option<String>,
    pub pretrained_a: Option<String>,
    pub pretrained_b: Option<String>,
    /// Which split evaluation commands use: train | val | test.
    pub eval_split: String,
    /// Which language encoder scores sentence pairs: a | b.
    pub sts_lang: String,
    pub threads: usize,
    // Synthetic-corpus generator settings.
    pub synth_concepts: usize,
    pub synth_images: usize,
    pub synth_objects: usize,
    pub synth_vocab: usize,
    pub synth_captions: usize,
    pub synth_noise: f64,
    pub synth_d_v: usize,
    pub synth_seed: u64,
    // Gradient-check settings.
    pub gc_probes: usize,
    pub gc_h: f64,
    pub gc_tol: f64,
    pub gc_batch: usize,
    pub gc_len: usize,
}

impl JobConfig {
    pub fn new() -> Self {
        JobConfig {
            run: RunConfig::default(),
            features: None,
            captions_a: None,
            captions_b: None,
            split_train: None,
            split_val: None,
            split_test: None,
            checkpoint: None,
            sts: None,
            pretrained_a: None,
            pretrained_b: None,
            eval_split: "test".into(),
            sts_lang: "a".into(),
            threads: 1,
            synth_concepts: 40,
            synth_images: 500,
            synth_objects: 3,
            synth_vocab: 60,
            synth_captions: 2,
            synth_noise: 0.0,
            synth_d_v: 64,
            synth_seed: 7,
            gc_probes: 200,
            gc_h: 1e-5,
            gc_tol: 1e-4,
            gc_batch: 3,
            gc_len: 4,
        }
    }

    pub fn apply(&mut self, key: &str, value: &str) -> ConfigResult<()> {
        if self.run.apply(key, value)? {
            return Ok(());
        }
        match key {
            "features" => self.features = Some(value.to_string()),
            "captions_a" => self.captions_a = Some(value.to_string()),
            "captions_b" => self.captions_b = Some(value.to_string()),
            "split_train" => self.split_train = Some(value.to_string()),
            "split_val" => self.split_val = Some(value.to_string()),
            "split_test" => self.split_test = Some(value.to_string()),
            "checkpoint" => self.checkpoint = Some(value.to_string()),
            "sts" => self.sts = Some(value.to_string()),
            "pretrained_a" => self.pretrained_a = Some(value.to_string()),
            "pretrained_b" => self.pretrained_b = Some(value.to_string()),
            "eval_split" => {
                if !matches!(value, "train" | "val" | "test") {
                    return Err(ConfigError::BadValue {
                        key: key.into(),
                        value: value.into(),
                        expected: "'train', 'val' or 'test'",
                    });
                }
                self.eval_split = value.to_string();
            }
            "sts_lang" => {
                if !matches!(value, "a" | "b") {
                    return Err(ConfigError::BadValue {
                        key: key.into(),
                        value: value.into(),
                        expected: "'a' or 'b'",
                    });
                }
                self.sts_lang = value.to_string();
            }
            "threads" => self.threads = parse_num(key, value, "usize")?,
            "synth_concepts" => self.synth_concepts = parse_num(key, value, "usize")?,
            "synth_images" => self.synth_images = parse_num(key, value, "usize")?,
            "synth_objects" => self.synth_objects = parse_num(key, value, "usize")?,
            "synth_vocab" => self.synth_vocab = parse_num(key, value, "usize")?,
            "synth_captions" => self.synth_captions = parse_num(key, value, "usize")?,
            "synth_noise" => self.synth_noise = parse_num(key, value, "float")?,
            "synth_d_v" => self.synth_d_v = parse_num(key, value, "usize")?,
            "synth_seed" => self.synth_seed = parse_num(key, value, "u64")?,
            "gc_probes" => self.gc_probes = parse_num(key, value, "usize")?,
            "gc_h" => self.gc_h = parse_num(key, value, "float")?,
            "gc_tol" => self.gc_tol = parse_num(key, value, "float")?,
            "gc_batch" => self.gc_batch = parse_num(key, value, "usize")?,
            "gc_len" => self.gc_len = parse_num(key, value, "usize")?,
            _ => return Err(ConfigError::UnknownKey { key: key.into() }),
        }
        Ok(())
    }

    /// Parse a config file body, then apply overrides in order.
    pub fn parse(text: &str, overrides: &[(String, String)]) -> ConfigResult<Self> {
        let mut cfg = JobConfig::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or(ConfigError::MissingEquals { line: lineno + 1 })?;
            cfg.apply(key.trim(), value.trim())?;
        }
        for (key, value) in overrides {
            cfg.apply(key, value)?;
        }
        cfg.run.validate()?;
        Ok(cfg)
    }

    fn path_pairs(&self) -> Vec<(String, String)> {
        let opt = |k: &str, v: &Option<String>| v.as_ref().map(|v| (k.to_string(), v.clone()));
        [
            opt("features", &self.features),
            opt("captions_a", &self.captions_a),
            opt("captions_b", &self.captions_b),
            opt("split_train", &self.split_train),
            opt("split_val", &self.split_val),
            opt("split_test", &self.split_test),
            opt("checkpoint", &self.checkpoint),
            opt("sts", &self.sts),
            opt("pretrained_a", &self.pretrained_a),
            opt("pretrained_b", &self.pretrained_b),
        ]
        .into_iter()
        .flatten()
        .collect()
    }

    /// Full resolved snapshot, parseable by [`JobConfig::parse`].
    pub fn snapshot(&self) -> String {
        let mut out = String::from("# resolved configuration snapshot\n");
        for (k, v) in self.run.to_pairs() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        for (k, v) in self.path_pairs() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out.push_str(&format!("eval_split = {}\n", self.eval_split));
        out.push_str(&format!("sts_lang = {}\n", self.sts_lang));
        out.push_str(&format!("threads = {}\n", self.threads));
        out.push_str(&format!("synth_concepts = {}\n", self.synth_concepts));
        out.push_str(&format!("synth_images = {}\n", self.synth_images));
        out.push_str(&format!("synth_objects = {}\n", self.synth_objects));
        out.push_str(&format!("synth_vocab = {}\n", self.synth_vocab));
        out.push_str(&format!("synth_captions = {}\n", self.synth_captions));
        out.push_str(&format!("synth_noise = {}\n", self.synth_noise));
        out.push_str(&format!("synth_d_v = {}\n", self.synth_d_v));
        out.push_str(&format!("synth_seed = {}\n", self.synth_seed));
        out.push_str(&format!("gc_probes = {}\n", self.gc_probes));
        out.push_str(&format!("gc_h = {}\n", self.gc_h));
        out.push_str(&format!("gc_tol = {}\n", self.gc_tol));
        out.push_str(&format!("gc_batch = {}\n", self.gc_batch));
        out.push_str(&format!("gc_len = {}\n", self.gc_len));
        out
    }
}
