//! Flat `key=value` configuration.
//!
//! Files may contain blank lines and `#` comments. Every key is optional and
//! falls back to its default; unknown keys are rejected. Overrides given as
//! `key=value` strings are applied after the file and win over it.
//!
//! The canonical text lists every key in sorted order with its parsed value,
//! one `key=value` per line; its SHA-256 digest identifies a run.

use crate::error::{Error, Result};
use crate::geometry::Grading;
use crate::losses::BgMode;
use crate::prompt::TokenPosition;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

/// Whether per-group contexts are averaged before encoding or their class
/// embeddings are averaged after encoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum EnsembleLevel {
    #[default]
    Context,
    Embedding,
}

impl EnsembleLevel {
    pub fn as_str(self) -> &'static str {
        match self {
            EnsembleLevel::Context => "context",
            EnsembleLevel::Embedding => "embedding",
        }
    }
}

impl fmt::Display for EnsembleLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EnsembleLevel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "context" => Ok(EnsembleLevel::Context),
            "embedding" => Ok(EnsembleLevel::Embedding),
            other => Err(Error::config(format!(
                "ensemble_level must be context or embedding, got {other:?}"
            ))),
        }
    }
}

/// Which kinds of training regions are used.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DataSources {
    /// Ground-truth boxes.
    pub gt: bool,
    /// Region proposals matched to a ground truth.
    pub fg: bool,
    /// Background proposals.
    pub bg: bool,
}

impl Default for DataSources {
    fn default() -> Self {
        DataSources {
            gt: true,
            fg: true,
            bg: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Seeds {
    pub init: u64,
    pub data: u64,
    pub encoder: u64,
}

/// Everything that determines a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub context_len: usize,
    pub token_dim: usize,
    pub embed_dim: usize,
    pub init_std: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub temperature: f64,
    pub bg_mode: BgMode,
    pub neg_fraction: f64,
    pub token_position: TokenPosition,
    pub grading: Grading,
    pub iou_threshold: f64,
    pub ensemble_level: EnsembleLevel,
    pub gt_in_all_groups: bool,
    pub sources: DataSources,
    pub seeds: Seeds,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            context_len: 8,
            token_dim: 32,
            embed_dim: 32,
            init_std: 0.02,
            lr: 0.002,
            epochs: 6,
            batch_size: 64,
            temperature: 0.01,
            bg_mode: BgMode::SoftBg,
            neg_fraction: 0.1,
            token_position: TokenPosition::End,
            grading: Grading::default(),
            iou_threshold: 0.5,
            ensemble_level: EnsembleLevel::Context,
            gt_in_all_groups: false,
            sources: DataSources::default(),
            seeds: Seeds::default(),
        }
    }
}

impl TrainConfig {
    /// Checks ranges that parsing alone cannot enforce.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if self.context_len == 0 || self.token_dim == 0 || self.embed_dim == 0 {
            return bad("context_len, token_dim and embed_dim must be at least 1".into());
        }
        if self.context_len + 1 > crate::encoder::MAX_PROMPT_LEN {
            return bad(format!(
                "context_len {} exceeds the encoder capacity of {} rows",
                self.context_len,
                crate::encoder::MAX_PROMPT_LEN - 1
            ));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return bad(format!("init_std must be positive, got {}", self.init_std));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(self.neg_fraction > 0.0 && self.neg_fraction <= 1.0) {
            return bad(format!("neg_fraction must lie in (0, 1], got {}", self.neg_fraction));
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold < 1.0) {
            return bad(format!("iou_threshold must lie in (0, 1), got {}", self.iou_threshold));
        }
        self.grading.num_groups()?;
        Ok(())
    }
}

/// Parameters of the synthetic benchmark generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub base_classes: usize,
    pub novel_classes: usize,
    pub positives_per_class: usize,
    pub negatives: usize,
    pub sigma0: f64,
    pub slope: f64,
    pub rho: f64,
    pub planted_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            base_classes: 20,
            novel_classes: 10,
            positives_per_class: 50,
            negatives: 1000,
            sigma0: 0.1,
            slope: 2.0,
            rho: 0.2,
            planted_std: 0.15,
            seed: 0,
        }
    }
}

/// Training and generator settings read from one file.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Config {
    pub train: TrainConfig,
    pub synth: SynthConfig,
}

fn parse<V: FromStr>(key: &str, v: &str) -> Result<V> {
    v.parse()
        .map_err(|_| Error::config(format!("invalid value {v:?} for key {key}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(format!("invalid boolean {v:?} for key {key}"))),
    }
}

impl Config {
    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        let s = &mut self.synth;
        let v = value.trim();
        match key.trim() {
            "context_len" => t.context_len = parse(key, v)?,
            "token_dim" => t.token_dim = parse(key, v)?,
            "embed_dim" => t.embed_dim = parse(key, v)?,
            "init_std" => t.init_std = parse(key, v)?,
            "lr" => t.lr = parse(key, v)?,
            "epochs" => t.epochs = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "temperature" => t.temperature = parse(key, v)?,
            "bg_mode" => t.bg_mode = v.parse()?,
            "neg_fraction" => t.neg_fraction = parse(key, v)?,
            "token_position" => t.token_position = v.parse()?,
            "grade_lo" => t.grading.lo = parse(key, v)?,
            "grade_hi" => t.grading.hi = parse(key, v)?,
            "grade_step" => t.grading.step = parse(key, v)?,
            "iou_threshold" => t.iou_threshold = parse(key, v)?,
            "ensemble_level" => t.ensemble_level = v.parse()?,
            "gt_in_all_groups" => t.gt_in_all_groups = parse_bool(key, v)?,
            "use_gt" => t.sources.gt = parse_bool(key, v)?,
            "use_fg" => t.sources.fg = parse_bool(key, v)?,
            "use_bg" => t.sources.bg = parse_bool(key, v)?,
            "seed_init" => t.seeds.init = parse(key, v)?,
            "seed_data" => t.seeds.data = parse(key, v)?,
            "seed_encoder" => t.seeds.encoder = parse(key, v)?,
            "synth_base_classes" => s.base_classes = parse(key, v)?,
            "synth_novel_classes" => s.novel_classes = parse(key, v)?,
            "synth_positives_per_class" => s.positives_per_class = parse(key, v)?,
            "synth_negatives" => s.negatives = parse(key, v)?,
            "synth_sigma0" => s.sigma0 = parse(key, v)?,
            "synth_slope" => s.slope = parse(key, v)?,
            "synth_rho" => s.rho = parse(key, v)?,
            "synth_planted_std" => s.planted_std = parse(key, v)?,
            "synth_seed" => s.seed = parse(key, v)?,
            other => return Err(Error::config(format!("unknown configuration key {other:?}"))),
        }
        Ok(())
    }

    /// All keys with their current values.
    pub fn entries(&self) -> BTreeMap<&'static str, String> {
        let t = &self.train;
        let s = &self.synth;
        let f = |x: f64| format!("{x:?}");
        BTreeMap::from([
            ("context_len", t.context_len.to_string()),
            ("token_dim", t.token_dim.to_string()),
            ("embed_dim", t.embed_dim.to_string()),
            ("init_std", f(t.init_std)),
            ("lr", f(t.lr)),
            ("epochs", t.epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("temperature", f(t.temperature)),
            ("bg_mode", t.bg_mode.to_string()),
            ("neg_fraction", f(t.neg_fraction)),
            ("token_position", t.token_position.to_string()),
            ("grade_lo", f(t.grading.lo)),
            ("grade_hi", f(t.grading.hi)),
            ("grade_step", f(t.grading.step)),
            ("iou_threshold", f(t.iou_threshold)),
            ("ensemble_level", t.ensemble_level.to_string()),
            ("gt_in_all_groups", t.gt_in_all_groups.to_string()),
            ("use_gt", t.sources.gt.to_string()),
            ("use_fg", t.sources.fg.to_string()),
            ("use_bg", t.sources.bg.to_string()),
            ("seed_init", t.seeds.init.to_string()),
            ("seed_data", t.seeds.data.to_string()),
            ("seed_encoder", t.seeds.encoder.to_string()),
            ("synth_base_classes", s.base_classes.to_string()),
            ("synth_novel_classes", s.novel_classes.to_string()),
            ("synth_positives_per_class", s.positives_per_class.to_string()),
            ("synth_negatives", s.negatives.to_string()),
            ("synth_sigma0", f(s.sigma0)),
            ("synth_slope", f(s.slope)),
            ("synth_rho", f(s.rho)),
            ("synth_planted_std", f(s.planted_std)),
            ("synth_seed", s.seed.to_string()),
        ])
    }

    /// Parses `key=value` text on top of the defaults.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut c = Config::default();
        let mut seen = std::collections::BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key=value", n + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::config(format!("line {}: key {k} given twice", n + 1)));
            }
            c.set(k, v)
                .map_err(|e| Error::config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(c)
    }

    /// Reads an optional file, applies overrides, and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut c = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::config(format!("cannot read {}: {e}", p.display())))?;
                Config::parse_text(&text)?
            }
            None => Config::default(),
        };
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::config(format!("override {o:?} is not key=value")))?;
            c.set(k, v)?;
        }
        c.train.validate()?;
        Ok(c)
    }

    /// Sorted `key=value` lines covering every key.
    pub fn canonical_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    pub fn hash(&self) -> [u8; 32] {
        hash_text(&self.canonical_text())
    }
}

/// SHA-256 of a configuration text.
pub fn hash_text(text: &str) -> [u8; 32] {
    let mut out = [0u8; 32];
    out.copy_from_slice(&Sha256::digest(text.as_bytes()));
    out
}

/// Lower-case hex rendering of a digest.
pub fn hex(bytes: &[u8]) -> String {
    hex::encode(bytes)
}
