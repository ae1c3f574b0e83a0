use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::augment::{AugmentConfig, AugmentMode, Factor};
use crate::contrastive::{LossConfig, PairMode};
use crate::nn::{AdamConfig, Architecture};

use super::{PipelineError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossMode {
    /// Encoder and classifier trained jointly on cross-entropy, no contrastive stage.
    Baseline,
    LabelOnly,
    #[default]
    Micro,
}

impl LossMode {
    pub fn pair_mode(self) -> Option<PairMode> {
        match self {
            LossMode::Baseline => None,
            LossMode::LabelOnly => Some(PairMode::LabelOnly),
            LossMode::Micro => Some(PairMode::Micro),
        }
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossMode::Baseline => "baseline",
            LossMode::LabelOnly => "label_only",
            LossMode::Micro => "micro",
        })
    }
}

impl FromStr for LossMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "baseline" => Ok(LossMode::Baseline),
            "label_only" => Ok(LossMode::LabelOnly),
            "micro" => Ok(LossMode::Micro),
            _ => Err(format!("unknown loss mode {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FloatMode {
    #[default]
    F64,
    F32,
}

impl fmt::Display for FloatMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FloatMode::F64 => "64",
            FloatMode::F32 => "32",
        })
    }
}

impl FromStr for FloatMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "64" => Ok(FloatMode::F64),
            "32" => Ok(FloatMode::F32),
            _ => Err(format!("float_mode must be 32 or 64, got {s:?}")),
        }
    }
}

/// Everything that determines a training run.
///
/// The text form is one `key = value` per line; `#` starts a comment. Keys
/// are the field names below, with the augmentation settings spelled
/// `augment_mode`, `augment_factor` and `augment_flip`, and the layer widths
/// as comma-separated lists.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub points: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub tau: f64,
    pub t_fa: f64,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub augment_mode: AugmentMode,
    pub augment_factor: Factor,
    pub augment_flip: bool,
    pub loss_mode: LossMode,
    pub seed: u64,
    pub float_mode: FloatMode,
    /// Streamlines shorter than this are dropped before training and prediction.
    pub min_length_mm: f64,
    pub fa_channel: String,
    /// Feed each streamline's mean FA to the encoder as a fourth input channel.
    pub fa_input: bool,
    pub encoder_widths: Vec<usize>,
    pub projection_widths: Vec<usize>,
    pub classifier_widths: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let arch = Architecture::default();
        Self {
            points: 60,
            batch_size: 512,
            lr: 0.01,
            tau: 0.1,
            t_fa: 0.1,
            epochs_stage1: 100,
            epochs_stage2: 100,
            augment_mode: AugmentMode::Subsampling,
            augment_factor: Factor::Fixed(8),
            augment_flip: false,
            loss_mode: LossMode::Micro,
            seed: 0,
            float_mode: FloatMode::F64,
            min_length_mm: 80.0,
            fa_channel: "FA".to_string(),
            fa_input: false,
            encoder_widths: arch.encoder,
            projection_widths: arch.projection,
            classifier_widths: arch.classifier,
        }
    }
}

fn parse_widths(v: &str) -> std::result::Result<Vec<usize>, String> {
    v.split(',')
        .map(|w| w.trim().parse::<usize>().map_err(|e| format!("{w:?}: {e}")))
        .collect()
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("expected true or false, got {v:?}")),
    }
}

fn join(ws: &[usize]) -> String {
    ws.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    pub fn architecture(&self) -> Architecture {
        Architecture {
            input_channels: if self.fa_input { 4 } else { 3 },
            encoder: self.encoder_widths.clone(),
            projection: self.projection_widths.clone(),
            classifier: self.classifier_widths.clone(),
        }
    }

    pub fn augment(&self) -> AugmentConfig {
        AugmentConfig {
            mode: self.augment_mode,
            factor: self.augment_factor,
            points: self.points,
            seed: self.seed,
            flip: self.augment_flip,
        }
    }

    pub fn loss(&self) -> Option<LossConfig> {
        self.loss_mode.pair_mode().map(|mode| LossConfig {
            tau: self.tau,
            t_fa: self.t_fa,
            mode,
        })
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig::with_lr(self.lr)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::InvalidConfig(m));
        if self.points < 2 {
            return bad(format!("points must be at least 2, got {}", self.points));
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.t_fa >= 0.0) {
            return bad(format!("t_fa must be non-negative, got {}", self.t_fa));
        }
        if self.augment_factor == Factor::Fixed(0) {
            return bad("augment_factor must be at least 1".into());
        }
        if !(self.min_length_mm >= 0.0) {
            return bad(format!("min_length_mm must be non-negative, got {}", self.min_length_mm));
        }
        self.architecture()
            .validate()
            .map_err(|e| PipelineError::InvalidConfig(e.to_string()))
    }

    /// Parses the `key = value` form. Unknown and repeated keys are errors;
    /// missing keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let pairs = crate::kv::pairs(text).map_err(|(line, message)| PipelineError::Config { line, message })?;
        for (line, key, value) in pairs {
            cfg.set(key, value).map_err(|message| PipelineError::Config { line, message })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        use crate::kv::number as num;
        match key {
            "points" => self.points = num(v)?,
            "batch_size" => self.batch_size = num(v)?,
            "lr" => self.lr = num(v)?,
            "tau" => self.tau = num(v)?,
            "t_fa" => self.t_fa = num(v)?,
            "epochs_stage1" => self.epochs_stage1 = num(v)?,
            "epochs_stage2" => self.epochs_stage2 = num(v)?,
            "augment_mode" => self.augment_mode = v.parse()?,
            "augment_factor" => self.augment_factor = v.parse()?,
            "augment_flip" => self.augment_flip = parse_bool(v)?,
            "loss_mode" => self.loss_mode = v.parse()?,
            "seed" => self.seed = num(v)?,
            "float_mode" => self.float_mode = v.parse()?,
            "min_length_mm" => self.min_length_mm = num(v)?,
            "fa_channel" => self.fa_channel = v.to_string(),
            "fa_input" => self.fa_input = parse_bool(v)?,
            "encoder_widths" => self.encoder_widths = parse_widths(v)?,
            "projection_widths" => self.projection_widths = parse_widths(v)?,
            "classifier_widths" => self.classifier_widths = parse_widths(v)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// The `key = value` form with every key present. Floats use the shortest
    /// representation that parses back to the same value.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv("points", self.points.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("lr", format!("{:?}", self.lr));
        kv("tau", format!("{:?}", self.tau));
        kv("t_fa", format!("{:?}", self.t_fa));
        kv("epochs_stage1", self.epochs_stage1.to_string());
        kv("epochs_stage2", self.epochs_stage2.to_string());
        kv("augment_mode", self.augment_mode.to_string());
        kv("augment_factor", self.augment_factor.to_string());
        kv("augment_flip", self.augment_flip.to_string());
        kv("loss_mode", self.loss_mode.to_string());
        kv("seed", self.seed.to_string());
        kv("float_mode", self.float_mode.to_string());
        kv("min_length_mm", format!("{:?}", self.min_length_mm));
        kv("fa_channel", self.fa_channel.clone());
        kv("fa_input", self.fa_input.to_string());
        kv("encoder_widths", join(&self.encoder_widths));
        kv("projection_widths", join(&self.projection_widths));
        kv("classifier_widths", join(&self.classifier_widths));
        s
    }
}
