use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::corpus::DEFAULT_BATCH_SIZE;
use crate::embeddings::DEFAULT_EMBEDDING_DIM;
use crate::error::{Error, Result};
use crate::gru::{DEFAULT_HIDDEN, DEFAULT_LAYERS};

/// Which prefix the classifier sees while training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    /// Ground-truth prefixes (teacher forcing).
    TeacherForced,
    /// The model's own argmax predictions as the prefix.
    SelfFed,
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teacher_forced" | "teacher-forced" => Ok(Method::TeacherForced),
            "self_fed" | "self-fed" => Ok(Method::SelfFed),
            other => Err(Error::Config(format!("unknown training method {other:?}"))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::TeacherForced => "teacher_forced",
            Method::SelfFed => "self_fed",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingConfig {
    pub method: Method,
    pub batch_size: usize,
    pub layers: usize,
    pub hidden_size: usize,
    pub embedding_dim: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Element-wise bound applied to every gradient component.
    pub gradient_clip: f64,
    pub max_epochs: usize,
    pub seed: u64,
    /// Checkpoint every this many batches (plus every epoch end); 0 disables
    /// the intra-epoch checkpoints.
    pub checkpoint_interval: usize,
    /// Record wall-clock milliseconds in the log; when false the column is 0.
    pub log_millis: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            method: Method::TeacherForced,
            batch_size: DEFAULT_BATCH_SIZE,
            layers: DEFAULT_LAYERS,
            hidden_size: DEFAULT_HIDDEN,
            embedding_dim: DEFAULT_EMBEDDING_DIM,
            learning_rate: 0.01,
            momentum: 0.9,
            gradient_clip: 100.0,
            max_epochs: 10,
            seed: 0,
            checkpoint_interval: 500,
            log_millis: true,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_owned()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail("momentum must lie in [0, 1)");
        }
        if !(self.gradient_clip > 0.0) {
            return fail("gradient_clip must be positive");
        }
        if self.batch_size == 0 || self.layers == 0 || self.hidden_size == 0 {
            return fail("batch_size, layers and hidden_size must be positive");
        }
        if self.embedding_dim == 0 {
            return fail("embedding_dim must be positive");
        }
        Ok(())
    }

    /// Parses flat `key = value` text; `#` starts a comment. Unset keys keep
    /// their defaults, unknown keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = TrainingConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "method" => c.method = value.parse()?,
                "batch_size" => c.batch_size = parse(key, value)?,
                "layers" => c.layers = parse(key, value)?,
                "hidden_size" => c.hidden_size = parse(key, value)?,
                "embedding_dim" => c.embedding_dim = parse(key, value)?,
                "learning_rate" => c.learning_rate = parse(key, value)?,
                "momentum" | "momentum_coefficient" => c.momentum = parse(key, value)?,
                "gradient_clip" => c.gradient_clip = parse(key, value)?,
                "max_epochs" => c.max_epochs = parse(key, value)?,
                "seed" | "rng_seed" => c.seed = parse(key, value)?,
                "checkpoint_interval" => c.checkpoint_interval = parse(key, value)?,
                "log_millis" => c.log_millis = parse(key, value)?,
                other => {
                    return Err(Error::Config(format!(
                        "line {}: unknown key {other:?}",
                        n + 1
                    )))
                }
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::parse(&text)
    }
}

impl fmt::Display for TrainingConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "method = {}", self.method)?;
        writeln!(f, "batch_size = {}", self.batch_size)?;
        writeln!(f, "layers = {}", self.layers)?;
        writeln!(f, "hidden_size = {}", self.hidden_size)?;
        writeln!(f, "embedding_dim = {}", self.embedding_dim)?;
        writeln!(f, "learning_rate = {}", self.learning_rate)?;
        writeln!(f, "momentum = {}", self.momentum)?;
        writeln!(f, "gradient_clip = {}", self.gradient_clip)?;
        writeln!(f, "max_epochs = {}", self.max_epochs)?;
        writeln!(f, "seed = {}", self.seed)?;
        writeln!(f, "checkpoint_interval = {}", self.checkpoint_interval)?;
        writeln!(f, "log_millis = {}", self.log_millis)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_reference_setup() {
        let c = TrainingConfig::default();
        assert_eq!(c.batch_size, 128);
        assert_eq!(c.layers, 4);
        assert_eq!(c.hidden_size, 500);
        assert_eq!(c.embedding_dim, 300);
        assert_eq!(c.gradient_clip, 100.0);
        assert_eq!(c.checkpoint_interval, 500);
    }

    #[test]
    fn parse_round_trip() {
        let c = TrainingConfig::parse(
            "# toy\nmethod = self_fed\nlayers=2\nhidden_size = 16\nlearning_rate=0.5 # fast\nseed=7\n",
        )
        .unwrap();
        assert_eq!(c.method, Method::SelfFed);
        assert_eq!(c.layers, 2);
        assert_eq!(c.learning_rate, 0.5);
        assert_eq!(TrainingConfig::parse(&c.to_string()).unwrap(), c);
    }

    #[test]
    fn parse_rejects_bad_input() {
        assert!(TrainingConfig::parse("colour = blue").is_err());
        assert!(TrainingConfig::parse("layers").is_err());
        assert!(TrainingConfig::parse("momentum = 1.0").is_err());
        assert!(TrainingConfig::parse("gradient_clip = 0").is_err());
        assert!(TrainingConfig::parse("method = sideways").is_err());
        assert!(TrainingConfig::parse("learning_rate = -1").is_err());
    }
}
