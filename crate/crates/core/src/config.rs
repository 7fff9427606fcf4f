//! Model and training configuration, its canonical text form and digest.
//!
//! The text form is `key = value` lines (UTF-8, `#` starts a comment). The
//! same [`ModelConfig::set`] entry point parses config files and command-line
//! overrides, so defaults < file < flags falls out of call order.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{QnnError, Result};
use crate::layers::{Activation, DropoutGranularity};
use crate::scalar::Precision;

macro_rules! string_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $text)] $variant),+
        }

        impl $name {
            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = QnnError;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(QnnError::config(format!(
                        concat!("unknown ", stringify!($name), " '{}'"), other
                    ))),
                }
            }
        }
    };
}

string_enum!(FrontEndKind {
    R2HNorm => "r2h-norm",
    R2H => "r2h",
    NaiveQuat => "naive-quat",
    Identity => "identity",
});

string_enum!(StackKind {
    Qlstm => "qlstm",
    Lstm => "lstm",
});

string_enum!(MergeRule {
    Sum => "sum",
    Concat => "concat",
});

string_enum!(LrRule {
    Stall => "stall",
    Literal => "literal",
});

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub front_end: FrontEndKind,
    /// Real output width of the encoder front-end.
    pub r2h_size: usize,
    pub r2h_activation: Activation,
    pub stack: StackKind,
    pub depth: usize,
    /// Real width of each recurrent layer (quaternion count × 4).
    pub hidden: usize,
    pub merge: MergeRule,
    pub input_dim: usize,
    pub classes: usize,
    pub dropout: f64,
    pub dropout_granularity: DropoutGranularity,
    pub epochs: usize,
    pub lr: f64,
    pub lr_rule: LrRule,
    pub lr_threshold: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub precision: Precision,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            front_end: FrontEndKind::R2HNorm,
            r2h_size: 1024,
            r2h_activation: Activation::Tanh,
            stack: StackKind::Qlstm,
            depth: 4,
            hidden: 1024,
            merge: MergeRule::Sum,
            input_dim: 40,
            classes: 2000,
            dropout: 0.2,
            dropout_granularity: DropoutGranularity::Quaternion,
            epochs: 30,
            lr: 1e-3,
            lr_rule: LrRule::Stall,
            lr_threshold: 1e-3,
            batch_size: 16,
            seed: 1234,
            precision: Precision::F32,
            norm_eps: crate::quat::DEFAULT_NORM_EPS,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| QnnError::config(format!("invalid value '{value}' for '{key}'")))
}

impl ModelConfig {
    pub const KEYS: &'static [&'static str] = &[
        "front_end",
        "r2h_size",
        "r2h_activation",
        "stack",
        "depth",
        "hidden",
        "merge",
        "input_dim",
        "classes",
        "dropout",
        "dropout_granularity",
        "epochs",
        "lr",
        "lr_rule",
        "lr_threshold",
        "batch_size",
        "seed",
        "precision",
        "norm_eps",
    ];

    /// Sets one field from its text form. Keys accept `-` or `_`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let value = value.trim();
        match key.as_str() {
            "front_end" => self.front_end = value.parse()?,
            "r2h_size" => self.r2h_size = parse(&key, value)?,
            "r2h_activation" => self.r2h_activation = value.parse()?,
            "stack" => self.stack = value.parse()?,
            "depth" => self.depth = parse(&key, value)?,
            "hidden" => self.hidden = parse(&key, value)?,
            "merge" => self.merge = value.parse()?,
            "input_dim" => self.input_dim = parse(&key, value)?,
            "classes" => self.classes = parse(&key, value)?,
            "dropout" => self.dropout = parse(&key, value)?,
            "dropout_granularity" => self.dropout_granularity = value.parse()?,
            "epochs" => self.epochs = parse(&key, value)?,
            "lr" => self.lr = parse(&key, value)?,
            "lr_rule" => self.lr_rule = value.parse()?,
            "lr_threshold" => self.lr_threshold = parse(&key, value)?,
            "batch_size" => self.batch_size = parse(&key, value)?,
            "seed" => self.seed = parse(&key, value)?,
            "precision" => {
                self.precision = match value {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    other => return Err(QnnError::config(format!("unknown precision '{other}'"))),
                }
            }
            "norm_eps" => self.norm_eps = parse(&key, value)?,
            other => return Err(QnnError::config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                QnnError::config(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            self.set(k, v)
                .map_err(|e| QnnError::config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = ModelConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path)?;
        self.apply_text(&text)
    }

    /// Canonical serialisation: every key, fixed order, one per line.
    pub fn canonical(&self) -> String {
        let values: [String; 19] = [
            self.front_end.to_string(),
            self.r2h_size.to_string(),
            self.r2h_activation.to_string(),
            self.stack.to_string(),
            self.depth.to_string(),
            self.hidden.to_string(),
            self.merge.to_string(),
            self.input_dim.to_string(),
            self.classes.to_string(),
            self.dropout.to_string(),
            self.dropout_granularity.to_string(),
            self.epochs.to_string(),
            self.lr.to_string(),
            self.lr_rule.to_string(),
            self.lr_threshold.to_string(),
            self.batch_size.to_string(),
            self.seed.to_string(),
            self.precision.as_str().to_string(),
            self.norm_eps.to_string(),
        ];
        Self::KEYS
            .iter()
            .zip(values)
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Hex SHA-256 of [`ModelConfig::canonical`].
    pub fn digest(&self) -> String {
        let hash = Sha256::digest(self.canonical().as_bytes());
        hash.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn uses_quaternions(&self) -> bool {
        self.stack == StackKind::Qlstm
            || matches!(self.front_end, FrontEndKind::R2HNorm | FrontEndKind::R2H)
    }

    /// Real width produced by the front-end.
    pub fn front_width(&self) -> usize {
        match self.front_end {
            FrontEndKind::R2HNorm | FrontEndKind::R2H => self.r2h_size,
            FrontEndKind::NaiveQuat => self.input_dim.div_ceil(4) * 4,
            FrontEndKind::Identity => self.input_dim,
        }
    }

    /// Real width of one bidirectional layer's merged output.
    pub fn layer_width(&self) -> usize {
        match self.merge {
            MergeRule::Sum => self.hidden,
            MergeRule::Concat => 2 * self.hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(QnnError::config(m));
        if self.input_dim == 0 {
            return fail("input_dim must be positive".into());
        }
        if self.classes == 0 {
            return fail("classes must be positive".into());
        }
        if matches!(self.front_end, FrontEndKind::R2HNorm | FrontEndKind::R2H)
            && (self.r2h_size == 0 || self.r2h_size % 4 != 0)
        {
            return fail(format!("r2h_size {} must be a positive multiple of 4", self.r2h_size));
        }
        if self.depth > 0 && self.hidden == 0 {
            return fail("hidden must be positive".into());
        }
        if self.stack == StackKind::Qlstm && self.depth > 0 {
            if self.hidden % 4 != 0 {
                return fail(format!("hidden {} must be a multiple of 4 for qlstm", self.hidden));
            }
            if self.front_width() % 4 != 0 {
                return fail(format!(
                    "front-end width {} must be a multiple of 4 for qlstm",
                    self.front_width()
                ));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return fail(format!("lr {} must be positive", self.lr));
        }
        if !(self.lr_threshold.is_finite() && self.lr_threshold >= 0.0) {
            return fail(format!("lr_threshold {} must be non-negative", self.lr_threshold));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(self.norm_eps.is_finite() && self.norm_eps > 0.0) {
            return fail(format!("norm_eps {} must be positive", self.norm_eps));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_roundtrip() {
        let mut c = ModelConfig::default();
        c.set("front-end", "naive-quat").unwrap();
        c.set("lr", "0.0005").unwrap();
        c.set("precision", "f64").unwrap();
        let back = ModelConfig::from_text(&c.canonical()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.digest(), c.digest());
        assert_ne!(ModelConfig::default().digest(), c.digest());
        assert_eq!(c.digest().len(), 64);
    }

    #[test]
    fn file_format_with_comments() {
        let c = ModelConfig::from_text("# experiment\nstack = lstm  # baseline\n\ndepth=2\n").unwrap();
        assert_eq!(c.stack, StackKind::Lstm);
        assert_eq!(c.depth, 2);
        assert!(ModelConfig::from_text("bogus = 1").is_err());
        assert!(ModelConfig::from_text("depth").is_err());
        assert!(ModelConfig::from_text("depth = many").is_err());
    }

    #[test]
    fn validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let mut c = ModelConfig::default();
        c.r2h_size = 30;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.front_end = FrontEndKind::Identity;
        c.input_dim = 39;
        assert!(c.validate().is_err());
        c.stack = StackKind::Lstm;
        assert!(c.validate().is_ok());
        let mut c = ModelConfig::default();
        c.dropout = 1.0;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.front_end = FrontEndKind::NaiveQuat;
        c.input_dim = 39;
        assert_eq!(c.front_width(), 40);
        assert!(c.validate().is_ok());
    }
}
