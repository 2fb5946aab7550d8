//! Run configuration shared by every command, stored as `key = value` lines.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use chronorag_core::coherer::{Bandwidth, Estimator, LossConfig};
use chronorag_core::hhtr::{DEFAULT_K, DEFAULT_PROBES, DEFAULT_RHO};
use chronorag_core::index::{TreeConfig, DEFAULT_CAP};
use chronorag_core::model::TrainConfig;
use chronorag_core::msil::{DEFAULT_EMBED_DIM, DEFAULT_HIDDEN};
use chronorag_core::series::DEFAULT_WINDOW;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub window: usize,
    pub stride: usize,
    pub cap: usize,
    pub k: usize,
    pub rho: f64,
    pub probes: usize,
    pub d: usize,
    pub h: usize,
    pub lambda: f64,
    pub seed: u64,
    pub estimator: Estimator,
    pub bandwidth: Bandwidth,
    pub horizon: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            window: DEFAULT_WINDOW,
            stride: DEFAULT_WINDOW,
            cap: DEFAULT_CAP,
            k: DEFAULT_K,
            rho: DEFAULT_RHO,
            probes: DEFAULT_PROBES,
            d: DEFAULT_EMBED_DIM,
            h: DEFAULT_HIDDEN,
            lambda: chronorag_core::coherer::DEFAULT_LAMBDA,
            seed: 0,
            estimator: Estimator::Biased,
            bandwidth: Bandwidth::MedianHeuristic,
            horizon: 16,
            epochs: 40,
            batch_size: 32,
            lr: 0.005,
        }
    }
}

pub const KEYS: [&str; 16] = [
    "window",
    "stride",
    "cap",
    "k",
    "rho",
    "probes",
    "d",
    "h",
    "lambda",
    "seed",
    "estimator",
    "bandwidth",
    "horizon",
    "epochs",
    "batch_size",
    "lr",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Usage(format!("invalid value `{value}` for `{key}`")))
}

pub fn parse_estimator(value: &str) -> Result<Estimator, CliError> {
    match value {
        "biased" => Ok(Estimator::Biased),
        "unbiased" => Ok(Estimator::Unbiased),
        _ => Err(CliError::Usage(format!(
            "estimator must be `biased` or `unbiased`, got `{value}`"
        ))),
    }
}

pub fn parse_bandwidth(value: &str) -> Result<Bandwidth, CliError> {
    if value == "median-heuristic" {
        return Ok(Bandwidth::MedianHeuristic);
    }
    Ok(Bandwidth::Fixed(parse("bandwidth", value)?))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let value = value.trim();
        match key {
            "window" => self.window = parse(key, value)?,
            "stride" => self.stride = parse(key, value)?,
            "cap" => self.cap = parse(key, value)?,
            "k" => self.k = parse(key, value)?,
            "rho" => self.rho = parse(key, value)?,
            "probes" => self.probes = parse(key, value)?,
            "d" => self.d = parse(key, value)?,
            "h" => self.h = parse(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "estimator" => self.estimator = parse_estimator(value)?,
            "bandwidth" => self.bandwidth = parse_bandwidth(value)?,
            "horizon" => self.horizon = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            _ => return Err(CliError::Usage(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "window" => self.window.to_string(),
            "stride" => self.stride.to_string(),
            "cap" => self.cap.to_string(),
            "k" => self.k.to_string(),
            "rho" => format!("{:?}", self.rho),
            "probes" => self.probes.to_string(),
            "d" => self.d.to_string(),
            "h" => self.h.to_string(),
            "lambda" => format!("{:?}", self.lambda),
            "seed" => self.seed.to_string(),
            "estimator" => match self.estimator {
                Estimator::Biased => "biased".into(),
                Estimator::Unbiased => "unbiased".into(),
            },
            "bandwidth" => match self.bandwidth {
                Bandwidth::MedianHeuristic => "median-heuristic".into(),
                Bandwidth::Fixed(s) => format!("{s:?}"),
            },
            "horizon" => self.horizon.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "lr" => format!("{:?}", self.lr),
            _ => return None,
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("known key"));
        }
        out
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn from_text(text: &str) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("config line {}: expected `key = value`", n + 1)))?;
            cfg.set(key.trim(), value)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    /// Checks every constraint, naming the first one violated.
    pub fn validate(&self) -> Result<(), CliError> {
        let fail = |msg: String| Err(CliError::Usage(format!("invalid config: {msg}")));
        if self.window == 0 {
            return fail("window must be >= 1".into());
        }
        if self.stride == 0 {
            return fail("stride must be >= 1".into());
        }
        if self.cap == 0 {
            return fail("cap must be >= 1".into());
        }
        if self.k == 0 {
            return fail("k must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return fail(format!("rho must lie in [0, 1], got {}", self.rho));
        }
        if self.probes == 0 {
            return fail("probes must be >= 1".into());
        }
        if self.d == 0 || self.h == 0 {
            return fail("d and h must be >= 1".into());
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return fail(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if let Bandwidth::Fixed(s) = self.bandwidth {
            if !(s.is_finite() && s > 0.0) {
                return fail(format!("bandwidth must be positive, got {s}"));
            }
        }
        if self.horizon == 0 {
            return fail("horizon must be >= 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        Ok(())
    }

    pub fn tree_config(&self) -> TreeConfig {
        TreeConfig {
            cap: self.cap,
            seed: self.seed,
            ..TreeConfig::default()
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda: self.lambda,
            bandwidth: self.bandwidth,
            estimator: self.estimator,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            seed: self.seed,
        }
    }
}
