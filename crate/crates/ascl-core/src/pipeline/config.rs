//! Training configuration and its flat key=value file format.
//!
//! The on-disk format is plain `section.key = value` lines; `#` starts a
//! comment. Unknown keys are rejected. Serialization round-trips exactly, so
//! the config echoed into an output artifact can be fed straight back in.
//!
//! Keys: `data.path`, `out.model`, `out.log`; `train.dim`, `train.k`,
//! `train.heads`, `train.batch`, `train.epochs`, `train.lr`,
//! `train.lr_schedule` (`decay_0.9_per10` | `decay_0.1_per10`), `train.tau`,
//! `train.u1`, `train.lambda`, `train.lambda_learnable`,
//! `train.positional_encoding`, `train.tied_directions`, `train.margin`,
//! `train.ablation` (`full` | `no_pos` | `no_neg` | `no_pn` | `no_mf` |
//! `triplet`), `train.seed`; `noise.kind` (`gaussian` | `shuffle` |
//! `token_cutoff` | `feature_cutoff` | `dropout` | `mixture`), `noise.sigma`,
//! `noise.p`, `noise.cut_count`; `positive.kind` (`concat` | `truncate` |
//! `alternate`), `positive.rho`, `positive.l_max`.

use std::collections::BTreeMap;

use crate::error::{AsclError, Result};
use crate::matcher::ModelInit;
use crate::samplegen::{NoiseStrategy, PositiveKind, PositiveStrategy};

/// Learning-rate schedule: 10% decay every 10 epochs, or a 10x cut every 10
/// epochs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrSchedule {
    Decay09Per10,
    Decay01Per10,
}

impl LrSchedule {
    pub fn as_str(self) -> &'static str {
        match self {
            LrSchedule::Decay09Per10 => "decay_0.9_per10",
            LrSchedule::Decay01Per10 => "decay_0.1_per10",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "decay_0.9_per10" => Ok(LrSchedule::Decay09Per10),
            "decay_0.1_per10" => Ok(LrSchedule::Decay01Per10),
            other => Err(AsclError::config(format!("unknown lr schedule '{other}'"))),
        }
    }
}

/// Which pieces of the objective and model are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    /// Generated positives and negatives, full fusion.
    Full,
    /// Generated negatives only.
    NoPos,
    /// Generated positives only.
    NoNeg,
    /// In-batch InfoNCE only.
    NoPn,
    /// Full objective but no modal fusion (global-only scoring).
    NoMf,
    /// Triplet hinge baseline, no generated samples.
    Triplet,
}

impl Ablation {
    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoPos => "no_pos",
            Ablation::NoNeg => "no_neg",
            Ablation::NoPn => "no_pn",
            Ablation::NoMf => "no_mf",
            Ablation::Triplet => "triplet",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Ablation::Full),
            "no_pos" => Ok(Ablation::NoPos),
            "no_neg" => Ok(Ablation::NoNeg),
            "no_pn" => Ok(Ablation::NoPn),
            "no_mf" => Ok(Ablation::NoMf),
            "triplet" => Ok(Ablation::Triplet),
            other => Err(AsclError::config(format!("unknown ablation '{other}'"))),
        }
    }

    pub const ALL: [Ablation; 6] = [
        Ablation::Full,
        Ablation::NoPos,
        Ablation::NoNeg,
        Ablation::NoPn,
        Ablation::NoMf,
        Ablation::Triplet,
    ];
}

/// Noise family selector for the config file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    Gaussian,
    Shuffle,
    TokenCutoff,
    FeatureCutoff,
    Dropout,
    Mixture,
}

impl NoiseKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NoiseKind::Gaussian => "gaussian",
            NoiseKind::Shuffle => "shuffle",
            NoiseKind::TokenCutoff => "token_cutoff",
            NoiseKind::FeatureCutoff => "feature_cutoff",
            NoiseKind::Dropout => "dropout",
            NoiseKind::Mixture => "mixture",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(NoiseKind::Gaussian),
            "shuffle" => Ok(NoiseKind::Shuffle),
            "token_cutoff" => Ok(NoiseKind::TokenCutoff),
            "feature_cutoff" => Ok(NoiseKind::FeatureCutoff),
            "dropout" => Ok(NoiseKind::Dropout),
            "mixture" => Ok(NoiseKind::Mixture),
            other => Err(AsclError::config(format!("unknown noise kind '{other}'"))),
        }
    }
}

fn positive_kind_str(kind: PositiveKind) -> &'static str {
    match kind {
        PositiveKind::Concat => "concat",
        PositiveKind::Truncate => "truncate",
        PositiveKind::Alternate => "alternate",
    }
}

fn parse_positive_kind(s: &str) -> Result<PositiveKind> {
    match s {
        "concat" => Ok(PositiveKind::Concat),
        "truncate" => Ok(PositiveKind::Truncate),
        "alternate" => Ok(PositiveKind::Alternate),
        other => Err(AsclError::config(format!("unknown positive kind '{other}'"))),
    }
}

/// Every hyperparameter and ablation switch of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub dim: usize,
    /// Nominal region count; synthetic defaults and gradcheck fixtures use
    /// it, datasets carry their own K per record.
    pub regions: usize,
    pub heads: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub tau: f64,
    pub u1: f64,
    pub lambda: f64,
    pub lambda_learnable: bool,
    pub positional_encoding: bool,
    pub tied_directions: bool,
    pub margin: f64,
    pub ablation: Ablation,
    pub seed: u64,
    pub noise_kind: NoiseKind,
    pub noise_sigma: f64,
    pub noise_p: f64,
    pub noise_cut_count: usize,
    pub positive_kind: PositiveKind,
    pub truncate_ratio: f64,
    pub l_max: usize,
    pub data_path: Option<String>,
    pub model_out: Option<String>,
    pub log_out: Option<String>,
}

impl Default for TrainConfig {
    /// Desk-scale defaults: D=64, H=4, K=8, N=8, 50 epochs, lr 1e-3.
    fn default() -> Self {
        TrainConfig {
            dim: 64,
            regions: 8,
            heads: 4,
            batch_size: 8,
            epochs: 50,
            lr: 1e-3,
            lr_schedule: LrSchedule::Decay09Per10,
            tau: 0.05,
            u1: 0.8,
            lambda: 0.5,
            lambda_learnable: false,
            positional_encoding: true,
            tied_directions: false,
            margin: 0.2,
            ablation: Ablation::Full,
            seed: 42,
            noise_kind: NoiseKind::Mixture,
            noise_sigma: crate::samplegen::DEFAULT_SIGMA,
            noise_p: crate::samplegen::DEFAULT_DROPOUT_P,
            noise_cut_count: crate::samplegen::DEFAULT_CUT_COUNT,
            positive_kind: PositiveKind::Alternate,
            truncate_ratio: crate::samplegen::DEFAULT_TRUNCATE_RATIO,
            l_max: crate::samplegen::DEFAULT_L_MAX,
            data_path: None,
            model_out: None,
            log_out: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(AsclError::config(format!(
                "heads {} must divide dim {}",
                self.heads, self.dim
            )));
        }
        if self.batch_size < 2 {
            return Err(AsclError::config("batch size must be at least 2"));
        }
        if self.epochs == 0 {
            return Err(AsclError::config("epochs must be at least 1"));
        }
        if self.lr <= 0.0 {
            return Err(AsclError::config("learning rate must be positive"));
        }
        if self.tau <= 0.0 {
            return Err(AsclError::config("temperature must be positive"));
        }
        if !(0.0..=1.0).contains(&self.u1) {
            return Err(AsclError::config("u1 must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(AsclError::config("lambda must lie in [0, 1]"));
        }
        if self.margin <= 0.0 {
            return Err(AsclError::config("triplet margin must be positive"));
        }
        self.noise_strategy().validate()?;
        self.positive_strategy().validate()?;
        if self.l_max == 0 {
            return Err(AsclError::config("positive.l_max must be positive"));
        }
        Ok(())
    }

    /// Learning rate at a 0-based epoch under the configured schedule.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let steps = (epoch / 10) as i32;
        match self.lr_schedule {
            LrSchedule::Decay09Per10 => self.lr * 0.9f64.powi(steps),
            LrSchedule::Decay01Per10 => self.lr * 0.1f64.powi(steps),
        }
    }

    /// The concrete noise strategy, expanding `mixture` to all five kinds.
    pub fn noise_strategy(&self) -> NoiseStrategy {
        match self.noise_kind {
            NoiseKind::Gaussian => NoiseStrategy::Gaussian {
                sigma: self.noise_sigma,
            },
            NoiseKind::Shuffle => NoiseStrategy::Shuffle,
            NoiseKind::TokenCutoff => NoiseStrategy::TokenCutoff {
                cut_count: self.noise_cut_count,
            },
            NoiseKind::FeatureCutoff => NoiseStrategy::FeatureCutoff {
                cut_count: self.noise_cut_count,
            },
            NoiseKind::Dropout => NoiseStrategy::Dropout { p: self.noise_p },
            NoiseKind::Mixture => NoiseStrategy::Mixture(vec![
                NoiseStrategy::Gaussian {
                    sigma: self.noise_sigma,
                },
                NoiseStrategy::Shuffle,
                NoiseStrategy::TokenCutoff {
                    cut_count: self.noise_cut_count,
                },
                NoiseStrategy::FeatureCutoff {
                    cut_count: self.noise_cut_count,
                },
                NoiseStrategy::Dropout { p: self.noise_p },
            ]),
        }
    }

    pub fn positive_strategy(&self) -> PositiveStrategy {
        PositiveStrategy {
            kind: self.positive_kind,
            truncate_ratio: self.truncate_ratio,
        }
    }

    /// Model construction switches implied by this config.
    pub fn model_init(&self) -> ModelInit {
        ModelInit {
            dim: self.dim,
            heads: self.heads,
            u1: self.u1,
            lambda: self.lambda,
            positional_encoding: self.positional_encoding,
            tied_directions: self.tied_directions,
            lambda_learnable: self.lambda_learnable,
            fusion_enabled: self.ablation != Ablation::NoMf,
        }
    }

    /// Flat key=value map; the echo embedded in every output artifact.
    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let mut kv = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            kv.insert(k.to_string(), v);
        };
        if let Some(p) = &self.data_path {
            put("data.path", p.clone());
        }
        if let Some(p) = &self.model_out {
            put("out.model", p.clone());
        }
        if let Some(p) = &self.log_out {
            put("out.log", p.clone());
        }
        put("train.dim", self.dim.to_string());
        put("train.k", self.regions.to_string());
        put("train.heads", self.heads.to_string());
        put("train.batch", self.batch_size.to_string());
        put("train.epochs", self.epochs.to_string());
        put("train.lr", self.lr.to_string());
        put("train.lr_schedule", self.lr_schedule.as_str().to_string());
        put("train.tau", self.tau.to_string());
        put("train.u1", self.u1.to_string());
        put("train.lambda", self.lambda.to_string());
        put("train.lambda_learnable", self.lambda_learnable.to_string());
        put(
            "train.positional_encoding",
            self.positional_encoding.to_string(),
        );
        put("train.tied_directions", self.tied_directions.to_string());
        put("train.margin", self.margin.to_string());
        put("train.ablation", self.ablation.as_str().to_string());
        put("train.seed", self.seed.to_string());
        put("noise.kind", self.noise_kind.as_str().to_string());
        put("noise.sigma", self.noise_sigma.to_string());
        put("noise.p", self.noise_p.to_string());
        put("noise.cut_count", self.noise_cut_count.to_string());
        put(
            "positive.kind",
            positive_kind_str(self.positive_kind).to_string(),
        );
        put("positive.rho", self.truncate_ratio.to_string());
        put("positive.l_max", self.l_max.to_string());
        kv
    }

    /// The config file representation.
    pub fn to_kv_string(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.to_kv() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, key: &str, value: &str) -> Result<()> {
        let parse_usize = |v: &str| {
            v.parse::<usize>()
                .map_err(|_| AsclError::config(format!("'{key}' expects an integer, got '{v}'")))
        };
        let parse_f64 = |v: &str| {
            v.parse::<f64>()
                .map_err(|_| AsclError::config(format!("'{key}' expects a number, got '{v}'")))
        };
        let parse_bool = |v: &str| match v {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(AsclError::config(format!(
                "'{key}' expects true/false, got '{v}'"
            ))),
        };
        match key {
            "data.path" => self.data_path = Some(value.to_string()),
            "out.model" => self.model_out = Some(value.to_string()),
            "out.log" => self.log_out = Some(value.to_string()),
            "train.dim" => self.dim = parse_usize(value)?,
            "train.k" => self.regions = parse_usize(value)?,
            "train.heads" => self.heads = parse_usize(value)?,
            "train.batch" => self.batch_size = parse_usize(value)?,
            "train.epochs" => self.epochs = parse_usize(value)?,
            "train.lr" => self.lr = parse_f64(value)?,
            "train.lr_schedule" => self.lr_schedule = LrSchedule::parse(value)?,
            "train.tau" => self.tau = parse_f64(value)?,
            "train.u1" => self.u1 = parse_f64(value)?,
            "train.lambda" => self.lambda = parse_f64(value)?,
            "train.lambda_learnable" => self.lambda_learnable = parse_bool(value)?,
            "train.positional_encoding" => self.positional_encoding = parse_bool(value)?,
            "train.tied_directions" => self.tied_directions = parse_bool(value)?,
            "train.margin" => self.margin = parse_f64(value)?,
            "train.ablation" => self.ablation = Ablation::parse(value)?,
            "train.seed" => {
                self.seed = value.parse::<u64>().map_err(|_| {
                    AsclError::config(format!("'train.seed' expects an integer, got '{value}'"))
                })?
            }
            "noise.kind" => self.noise_kind = NoiseKind::parse(value)?,
            "noise.sigma" => self.noise_sigma = parse_f64(value)?,
            "noise.p" => self.noise_p = parse_f64(value)?,
            "noise.cut_count" => self.noise_cut_count = parse_usize(value)?,
            "positive.kind" => self.positive_kind = parse_positive_kind(value)?,
            "positive.rho" => self.truncate_ratio = parse_f64(value)?,
            "positive.l_max" => self.l_max = parse_usize(value)?,
            other => {
                return Err(AsclError::config(format!("unknown config key '{other}'")));
            }
        }
        Ok(())
    }

    /// Parses config-file text over the defaults. Unknown keys are rejected.
    pub fn parse_kv_str(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(AsclError::config(format!(
                    "line {}: expected key = value, got '{raw}'",
                    lineno + 1
                )));
            };
            cfg.apply_override(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::parse_kv_str(&std::fs::read_to_string(path)?)
    }
}
