//! Flat `key = value` run configuration.
//!
//! One [`RunConfig`] carries every tunable: model shape, loss weights,
//! training schedule and dataset generation. Values merge in the order
//! defaults < config file < `MANETLAB_*` environment < command-line
//! `key=value` pairs; unknown keys are rejected. The effective
//! configuration serializes back to sorted `key = value` lines
//! (`config.resolved`) and that text is what gets hashed into
//! checkpoints.

use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

use crate::rng::fnv1a64;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value `{value}` for key `{key}`: {reason}")]
    InvalidValue {
        key: String,
        value: String,
        reason: String,
    },
    #[error("malformed config line `{0}` (expected `key = value`)")]
    MalformedLine(String),
    #[error("config violates invariant: {0}")]
    Invariant(String),
    #[error("cannot read config file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Which building blocks are active; Baseline is the all-false row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModuleFlags {
    pub ga: bool,
    pub ila: bool,
    pub rgl: bool,
    pub caf: bool,
}

impl ModuleFlags {
    pub fn full() -> Self {
        Self { ga: true, ila: true, rgl: true, caf: true }
    }

    pub fn baseline() -> Self {
        Self { ga: false, ila: false, rgl: false, caf: false }
    }

    pub fn label(&self) -> String {
        if *self == Self::baseline() {
            return "Baseline".to_string();
        }
        let mut parts = Vec::new();
        if self.ga {
            parts.push("GA");
        }
        if self.ila {
            parts.push("ILA");
        }
        if self.rgl {
            parts.push("RGL");
        }
        if self.caf {
            parts.push("CAF");
        }
        parts.join("+")
    }
}

/// How local assignments to topic centers are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AssignmentMode {
    /// Relation vector between position and center (the default).
    Relation,
    /// Scalar inner product broadcast across channels (ablation).
    InnerProduct,
}

/// Initialization scheme for the topic centers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CenterInit {
    StandardNormal,
    Uniform,
    KaimingNormal,
    XavierNormal,
    Zero,
    One,
    Identity,
    Constant,
    Orthogonal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub image_c: usize,
    pub image_h: usize,
    pub image_w: usize,
    /// Output channels of each stride-2 conv stage; the last entry is `C`.
    pub conv_channels: Vec<usize>,
    pub d_e: usize,
    pub cap_len: usize,
    pub d_g: usize,
    pub d_c: usize,
    pub k_centers: usize,
    pub r1: usize,
    pub r2: usize,
    pub r3: usize,
    pub se_ratio: usize,
    pub flags: ModuleFlags,
    pub assignment: AssignmentMode,
    pub center_init: CenterInit,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_c: 3,
            image_h: 48,
            image_w: 24,
            conv_channels: vec![32, 64],
            d_e: 32,
            cap_len: 24,
            d_g: 64,
            d_c: 32,
            k_centers: 6,
            r1: 4,
            r2: 16,
            r3: 4,
            se_ratio: 4,
            flags: ModuleFlags::full(),
            assignment: AssignmentMode::Relation,
            center_init: CenterInit::StandardNormal,
        }
    }
}

impl ModelConfig {
    /// Feature channels `C` (conv output and text hidden size).
    pub fn c(&self) -> usize {
        *self.conv_channels.last().expect("at least one conv stage")
    }

    /// Feature-map height/width after the stride-2 stack.
    pub fn feat_hw(&self) -> (usize, usize) {
        let mut h = self.image_h;
        let mut w = self.image_w;
        for _ in &self.conv_channels {
            // kernel 3, stride 2, pad 1
            h = (h + 2 - 3) / 2 + 1;
            w = (w + 2 - 3) / 2 + 1;
        }
        (h, w)
    }

    /// Full-scale dimensions quoted for the reference setup: 384x128
    /// inputs, C=2048 at 24x8, d_g=2048, d_c=512, r=(32,256,4), L=100.
    pub fn paper_dims() -> Self {
        Self {
            image_c: 3,
            image_h: 384,
            image_w: 128,
            conv_channels: vec![64, 128, 256, 2048],
            d_e: 512,
            cap_len: 100,
            d_g: 2048,
            d_c: 512,
            k_centers: 6,
            r1: 32,
            r2: 256,
            r3: 4,
            se_ratio: 16,
            flags: ModuleFlags::full(),
            assignment: AssignmentMode::Relation,
            center_init: CenterInit::StandardNormal,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let c = self.c();
        if c % self.r1 != 0 || c % self.r2 != 0 {
            return Err(ConfigError::Invariant(format!(
                "c={c} must be divisible by r1={} and r2={}",
                self.r1, self.r2
            )));
        }
        if self.d_c % self.r3 != 0 {
            return Err(ConfigError::Invariant(format!(
                "d_c={} must be divisible by r3={}",
                self.d_c, self.r3
            )));
        }
        if c % self.se_ratio != 0 {
            return Err(ConfigError::Invariant(format!(
                "c={c} must be divisible by se_ratio={}",
                self.se_ratio
            )));
        }
        if self.cap_len < 5 {
            return Err(ConfigError::Invariant("cap_len must be >= 5".into()));
        }
        let (h, w) = self.feat_hw();
        if h == 0 || w == 0 {
            return Err(ConfigError::Invariant(
                "conv stack reduces the image to nothing".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha1: 0.2,
            alpha2: 0.2,
            alpha3: 0.2,
            lambda1: 0.1,
            lambda2: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Identities per batch (P) and images per identity (Q).
    pub batch_p: usize,
    pub batch_q: usize,
    pub lr_backbone: f64,
    pub lr_rest: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub warmup_epochs: usize,
    pub flip_prob: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_p: 8,
            batch_q: 4,
            lr_backbone: 0.001,
            lr_rest: 0.01,
            decay_epochs: vec![30, 50],
            decay_factor: 0.1,
            warmup_epochs: 10,
            flip_prob: 0.5,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn batch_size(&self) -> usize {
        self.batch_p * self.batch_q
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if let Some(&min_decay) = self.decay_epochs.iter().min() {
            if self.warmup_epochs >= min_decay {
                return Err(ConfigError::Invariant(format!(
                    "warmup_epochs={} must be < min(decay_epochs)={min_decay}",
                    self.warmup_epochs
                )));
            }
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return Err(ConfigError::Invariant(
                "decay_factor must lie in (0, 1)".into(),
            ));
        }
        if self.batch_p < 2 {
            return Err(ConfigError::Invariant(
                "batch_p must be >= 2 so every batch has a negative identity".into(),
            ));
        }
        if self.batch_q < 1 {
            return Err(ConfigError::Invariant("batch_q must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatagenConfig {
    pub num_ids: usize,
    pub images_per_id: usize,
    pub holdout_per_id: usize,
    pub backgrounds: usize,
    pub tint_lo: f64,
    pub tint_hi: f64,
    pub seed: u64,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        Self {
            num_ids: 32,
            images_per_id: 8,
            holdout_per_id: 2,
            backgrounds: 32,
            tint_lo: 0.5,
            tint_hi: 1.5,
            seed: 7,
        }
    }
}

/// The merged configuration for a run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub datagen: DatagenConfig,
}

const KEYS: &[&str] = &[
    "preset",
    "image_c",
    "image_h",
    "image_w",
    "conv_channels",
    "d_e",
    "cap_len",
    "d_g",
    "d_c",
    "k",
    "r1",
    "r2",
    "r3",
    "se_ratio",
    "ga",
    "ila",
    "rgl",
    "caf",
    "assignment",
    "center_init",
    "alpha1",
    "alpha2",
    "alpha3",
    "lambda1",
    "lambda2",
    "epochs",
    "batch_p",
    "batch_q",
    "lr_backbone",
    "lr_rest",
    "decay_epochs",
    "decay_factor",
    "warmup_epochs",
    "flip_prob",
    "seed",
    "num_ids",
    "images_per_id",
    "holdout_per_id",
    "backgrounds",
    "tint_lo",
    "tint_hi",
    "datagen_seed",
];

fn parse_bool(key: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(ConfigError::InvalidValue {
            key: key.into(),
            value: v.into(),
            reason: "expected a boolean".into(),
        }),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ConfigError> {
    v.parse().map_err(|_| ConfigError::InvalidValue {
        key: key.into(),
        value: v.into(),
        reason: "not a number".into(),
    })
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>, ConfigError> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|p| parse_num::<usize>(key, p.trim()))
        .collect()
}

impl RunConfig {
    /// Apply one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        if !KEYS.contains(&key) {
            return Err(ConfigError::UnknownKey(key.to_string()));
        }
        let v = value.trim();
        match key {
            "preset" => match v {
                "toy" => {}
                "paper_schedule" => {
                    self.train.epochs = 70;
                    self.train.batch_p = 16;
                    self.train.batch_q = 4;
                }
                "paper_dims" => {
                    let flags = self.model.flags;
                    self.model = ModelConfig::paper_dims();
                    self.model.flags = flags;
                }
                _ => {
                    return Err(ConfigError::InvalidValue {
                        key: key.into(),
                        value: v.into(),
                        reason: "known presets: toy, paper_schedule, paper_dims".into(),
                    })
                }
            },
            "image_c" => self.model.image_c = parse_num(key, v)?,
            "image_h" => self.model.image_h = parse_num(key, v)?,
            "image_w" => self.model.image_w = parse_num(key, v)?,
            "conv_channels" => {
                let list = parse_list(key, v)?;
                if list.is_empty() {
                    return Err(ConfigError::InvalidValue {
                        key: key.into(),
                        value: v.into(),
                        reason: "need at least one conv stage".into(),
                    });
                }
                self.model.conv_channels = list;
            }
            "d_e" => self.model.d_e = parse_num(key, v)?,
            "cap_len" => self.model.cap_len = parse_num(key, v)?,
            "d_g" => self.model.d_g = parse_num(key, v)?,
            "d_c" => self.model.d_c = parse_num(key, v)?,
            "k" => self.model.k_centers = parse_num(key, v)?,
            "r1" => self.model.r1 = parse_num(key, v)?,
            "r2" => self.model.r2 = parse_num(key, v)?,
            "r3" => self.model.r3 = parse_num(key, v)?,
            "se_ratio" => self.model.se_ratio = parse_num(key, v)?,
            "ga" => self.model.flags.ga = parse_bool(key, v)?,
            "ila" => self.model.flags.ila = parse_bool(key, v)?,
            "rgl" => self.model.flags.rgl = parse_bool(key, v)?,
            "caf" => self.model.flags.caf = parse_bool(key, v)?,
            "assignment" => {
                self.model.assignment = match v {
                    "relation" => AssignmentMode::Relation,
                    "inner_product" => AssignmentMode::InnerProduct,
                    _ => {
                        return Err(ConfigError::InvalidValue {
                            key: key.into(),
                            value: v.into(),
                            reason: "expected relation | inner_product".into(),
                        })
                    }
                }
            }
            "center_init" => {
                self.model.center_init = match v {
                    "standard_normal" => CenterInit::StandardNormal,
                    "uniform" => CenterInit::Uniform,
                    "kaiming_normal" => CenterInit::KaimingNormal,
                    "xavier_normal" => CenterInit::XavierNormal,
                    "zero" => CenterInit::Zero,
                    "one" => CenterInit::One,
                    "identity" => CenterInit::Identity,
                    "constant" => CenterInit::Constant,
                    "orthogonal" => CenterInit::Orthogonal,
                    _ => {
                        return Err(ConfigError::InvalidValue {
                            key: key.into(),
                            value: v.into(),
                            reason: "unknown center initialization scheme".into(),
                        })
                    }
                }
            }
            "alpha1" => self.loss.alpha1 = parse_num(key, v)?,
            "alpha2" => self.loss.alpha2 = parse_num(key, v)?,
            "alpha3" => self.loss.alpha3 = parse_num(key, v)?,
            "lambda1" => self.loss.lambda1 = parse_num(key, v)?,
            "lambda2" => self.loss.lambda2 = parse_num(key, v)?,
            "epochs" => self.train.epochs = parse_num(key, v)?,
            "batch_p" => self.train.batch_p = parse_num(key, v)?,
            "batch_q" => self.train.batch_q = parse_num(key, v)?,
            "lr_backbone" => self.train.lr_backbone = parse_num(key, v)?,
            "lr_rest" => self.train.lr_rest = parse_num(key, v)?,
            "decay_epochs" => self.train.decay_epochs = parse_list(key, v)?,
            "decay_factor" => self.train.decay_factor = parse_num(key, v)?,
            "warmup_epochs" => self.train.warmup_epochs = parse_num(key, v)?,
            "flip_prob" => self.train.flip_prob = parse_num(key, v)?,
            "seed" => self.train.seed = parse_num(key, v)?,
            "num_ids" => self.datagen.num_ids = parse_num(key, v)?,
            "images_per_id" => self.datagen.images_per_id = parse_num(key, v)?,
            "holdout_per_id" => self.datagen.holdout_per_id = parse_num(key, v)?,
            "backgrounds" => self.datagen.backgrounds = parse_num(key, v)?,
            "tint_lo" => self.datagen.tint_lo = parse_num(key, v)?,
            "tint_hi" => self.datagen.tint_hi = parse_num(key, v)?,
            "datagen_seed" => self.datagen.seed = parse_num(key, v)?,
            _ => unreachable!("key validated above"),
        }
        Ok(())
    }

    /// Parse `key = value` lines ('#' starts a comment).
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for raw in text.lines() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::MalformedLine(raw.to_string()))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        self.apply_text(&text)
    }

    /// Apply `MANETLAB_<KEY>` environment overrides.
    pub fn apply_env(&mut self) -> Result<(), ConfigError> {
        for key in KEYS {
            if *key == "preset" {
                continue;
            }
            let var = format!("MANETLAB_{}", key.to_uppercase());
            if let Ok(v) = std::env::var(&var) {
                self.set(key, &v)?;
            }
        }
        Ok(())
    }

    /// Merge in standard order; `overrides` are `key=value` strings.
    pub fn resolve(
        file: Option<&Path>,
        overrides: &[String],
    ) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        if let Some(path) = file {
            cfg.apply_file(path)?;
        }
        cfg.apply_env()?;
        for ov in overrides {
            let (k, v) = ov
                .split_once('=')
                .ok_or_else(|| ConfigError::MalformedLine(ov.clone()))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate()?;
        self.train.validate()?;
        if self.datagen.tint_lo < 0.5 || self.datagen.tint_hi > 1.5 || self.datagen.tint_lo > self.datagen.tint_hi {
            return Err(ConfigError::Invariant(
                "tint range must lie within [0.5, 1.5]".into(),
            ));
        }
        Ok(())
    }

    /// Sorted `key = value` lines describing the effective configuration.
    pub fn resolved_text(&self) -> String {
        let mut map: BTreeMap<&str, String> = BTreeMap::new();
        let m = &self.model;
        map.insert("image_c", m.image_c.to_string());
        map.insert("image_h", m.image_h.to_string());
        map.insert("image_w", m.image_w.to_string());
        map.insert(
            "conv_channels",
            m.conv_channels
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        map.insert("d_e", m.d_e.to_string());
        map.insert("cap_len", m.cap_len.to_string());
        map.insert("d_g", m.d_g.to_string());
        map.insert("d_c", m.d_c.to_string());
        map.insert("k", m.k_centers.to_string());
        map.insert("r1", m.r1.to_string());
        map.insert("r2", m.r2.to_string());
        map.insert("r3", m.r3.to_string());
        map.insert("se_ratio", m.se_ratio.to_string());
        map.insert("ga", m.flags.ga.to_string());
        map.insert("ila", m.flags.ila.to_string());
        map.insert("rgl", m.flags.rgl.to_string());
        map.insert("caf", m.flags.caf.to_string());
        map.insert(
            "assignment",
            match m.assignment {
                AssignmentMode::Relation => "relation".into(),
                AssignmentMode::InnerProduct => "inner_product".into(),
            },
        );
        map.insert(
            "center_init",
            match m.center_init {
                CenterInit::StandardNormal => "standard_normal",
                CenterInit::Uniform => "uniform",
                CenterInit::KaimingNormal => "kaiming_normal",
                CenterInit::XavierNormal => "xavier_normal",
                CenterInit::Zero => "zero",
                CenterInit::One => "one",
                CenterInit::Identity => "identity",
                CenterInit::Constant => "constant",
                CenterInit::Orthogonal => "orthogonal",
            }
            .to_string(),
        );
        let l = &self.loss;
        map.insert("alpha1", format!("{}", l.alpha1));
        map.insert("alpha2", format!("{}", l.alpha2));
        map.insert("alpha3", format!("{}", l.alpha3));
        map.insert("lambda1", format!("{}", l.lambda1));
        map.insert("lambda2", format!("{}", l.lambda2));
        let t = &self.train;
        map.insert("epochs", t.epochs.to_string());
        map.insert("batch_p", t.batch_p.to_string());
        map.insert("batch_q", t.batch_q.to_string());
        map.insert("lr_backbone", format!("{}", t.lr_backbone));
        map.insert("lr_rest", format!("{}", t.lr_rest));
        map.insert(
            "decay_epochs",
            t.decay_epochs
                .iter()
                .map(|e| e.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        map.insert("decay_factor", format!("{}", t.decay_factor));
        map.insert("warmup_epochs", t.warmup_epochs.to_string());
        map.insert("flip_prob", format!("{}", t.flip_prob));
        map.insert("seed", t.seed.to_string());
        let d = &self.datagen;
        map.insert("num_ids", d.num_ids.to_string());
        map.insert("images_per_id", d.images_per_id.to_string());
        map.insert("holdout_per_id", d.holdout_per_id.to_string());
        map.insert("backgrounds", d.backgrounds.to_string());
        map.insert("tint_lo", format!("{}", d.tint_lo));
        map.insert("tint_hi", format!("{}", d.tint_hi));
        map.insert("datagen_seed", d.seed.to_string());
        map.iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Stable hash of the model-shape keys; checkpoints embed it and eval
    /// refuses mismatched pairs.
    pub fn model_hash(&self, n_y: usize, vocab: usize) -> u64 {
        let m = &self.model;
        let sig = format!(
            "image={}x{}x{} conv={:?} d_e={} L={} d_g={} d_c={} k={} r={},{},{} se={} flags={} assign={:?} n_y={n_y} v={vocab}",
            m.image_c, m.image_h, m.image_w, m.conv_channels, m.d_e, m.cap_len, m.d_g, m.d_c,
            m.k_centers, m.r1, m.r2, m.r3, m.se_ratio, m.flags.label(), m.assignment,
        );
        fnv1a64(sig.as_bytes())
    }
}
