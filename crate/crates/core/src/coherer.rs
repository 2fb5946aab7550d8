//! Model cooperation: the residual numeric path into a forecasting head, the
//! text prompt for language-model backends, and the MSE + MMD objective.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::process::{Command, Stdio};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hhtr::Hit;
use crate::series::NormStats;

pub const DEFAULT_LAMBDA: f64 = 0.1;

/// Trainable linear map from a context window of length `context` to
/// `horizon` future values. Stands in for a pretrained numeric backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    pub context: usize,
    pub horizon: usize,
    /// `horizon x context`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearHead {
    pub fn init(context: usize, horizon: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (context as f64).sqrt();
        Self {
            context,
            horizon,
            weights: (0..context * horizon).map(|_| rng.gen_range(-bound..=bound)).collect(),
            bias: (0..horizon).map(|_| rng.gen_range(-bound..=bound)).collect(),
        }
    }

    pub fn zeros(context: usize, horizon: usize) -> Self {
        Self {
            context,
            horizon,
            weights: vec![0.0; context * horizon],
            bias: vec![0.0; horizon],
        }
    }

    pub fn identity(len: usize) -> Self {
        let mut head = Self::zeros(len, len);
        for i in 0..len {
            head.weights[i * len + i] = 1.0;
        }
        head
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.context == 0 {
            return Err(Error::InvalidArgument("head needs positive context and horizon".into()));
        }
        if self.weights.len() != self.horizon * self.context || self.bias.len() != self.horizon {
            return Err(Error::InvalidArgument("head weight shape mismatch".into()));
        }
        Ok(())
    }

    pub fn apply(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.context {
            return Err(Error::LengthMismatch {
                expected: self.context,
                actual: input.len(),
            });
        }
        Ok(self
            .weights
            .chunks_exact(self.context)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>() + b)
            .collect())
    }

    /// Accumulates weight and bias gradients; returns dLoss/dinput.
    pub fn backward(&self, input: &[f64], d_out: &[f64], grad: &mut LinearHead) -> Vec<f64> {
        let mut d_in = vec![0.0; self.context];
        for (h, &g) in d_out.iter().enumerate() {
            grad.bias[h] += g;
            let row = &self.weights[h * self.context..(h + 1) * self.context];
            let grow = &mut grad.weights[h * self.context..(h + 1) * self.context];
            for i in 0..self.context {
                grow[i] += g * input[i];
                d_in[i] += g * row[i];
            }
        }
        d_in
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.weights.iter().chain(&self.bias)
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights.iter_mut().chain(self.bias.iter_mut())
    }
}

/// The forecasting model slot: a numeric head or an external text backend.
#[derive(Debug, Clone, PartialEq)]
pub enum ForecastHead {
    Linear(LinearHead),
    External(ExternalBackend),
}

/// Residual fusion: the head sees `t_norm + r_fused`.
pub fn numerical_coherer(r_fused: &[f64], t_norm: &[f64], head: &LinearHead) -> Result<Vec<f64>> {
    if r_fused.len() != t_norm.len() {
        return Err(Error::LengthMismatch {
            expected: t_norm.len(),
            actual: r_fused.len(),
        });
    }
    let fused: Vec<f64> = t_norm.iter().zip(r_fused).map(|(a, b)| a + b).collect();
    head.apply(&fused)
}

pub fn denormalize_forecast(forecast: &[f64], stats: &NormStats) -> Vec<f64> {
    stats.denormalize(forecast)
}

/// Descriptive fields shown to a text model.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PromptMetadata {
    pub item_id: String,
    pub domain: String,
    pub freq: String,
}

fn fmt4(v: f64) -> String {
    let s = format!("{v:.4}");
    if s == "-0.0000" {
        "0.0000".into()
    } else {
        s
    }
}

fn join4(values: &[f64]) -> String {
    values.iter().map(|&v| fmt4(v)).collect::<Vec<_>>().join(",")
}

/// Renders the structured forecasting prompt.
///
/// Sections, in order: task, target summary, retrieved knowledge, output
/// format. Every number is printed with four decimals.
pub fn build_prompt(
    t_norm: &[f64],
    raw_mean: &[f64],
    raw_product: &[f64],
    hits: &[Hit],
    metadata: &PromptMetadata,
    horizon: usize,
) -> String {
    let mut p = String::new();
    let w = t_norm.len();
    let _ = writeln!(p, "[Task]");
    let _ = writeln!(
        p,
        "Forecast the next {horizon} values of a univariate time series from its last {w} observations."
    );
    let _ = writeln!(p, "Context length: {w}. Horizon: {horizon}. Values are z-normalized.");
    let _ = writeln!(
        p,
        "Series: item_id={}, domain={}, freq={}",
        metadata.item_id, metadata.domain, metadata.freq
    );
    let _ = writeln!(p);

    let _ = writeln!(p, "[Target series]");
    if t_norm.is_empty() {
        let _ = writeln!(p, "empty");
    } else {
        let min = t_norm.iter().copied().fold(f64::INFINITY, f64::min);
        let max = t_norm.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = t_norm.iter().sum::<f64>() / w as f64;
        let last = t_norm[w - 1];
        let drift = last - t_norm[0];
        let trend = if drift > 0.0 {
            "increasing"
        } else if drift < 0.0 {
            "decreasing"
        } else {
            "flat"
        };
        let _ = writeln!(
            p,
            "min={}, max={}, mean={}, last={}, trend={trend}",
            fmt4(min),
            fmt4(max),
            fmt4(mean),
            fmt4(last)
        );
        let _ = writeln!(p, "values: {}", join4(t_norm));
    }
    let _ = writeln!(p);

    let _ = writeln!(p, "[Retrieved knowledge]");
    if hits.is_empty() {
        let _ = writeln!(p, "no auxiliary series retrieved");
    } else {
        for (i, h) in hits.iter().enumerate() {
            let _ = writeln!(p, "{}. domain={}, similarity={}", i + 1, h.domain, fmt4(h.score));
        }
        let _ = writeln!(p, "average pattern: {}", join4(raw_mean));
        let _ = writeln!(p, "interaction pattern: {}", join4(raw_product));
    }
    let _ = writeln!(p);

    let _ = writeln!(p, "[Output format]");
    let _ = writeln!(
        p,
        "Reply with exactly {horizon} comma-separated numbers and nothing else."
    );
    p
}

fn number_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?").expect("valid regex"))
}

/// First `horizon` numbers found in a model reply.
pub fn parse_forecast_text(text: &str, horizon: usize) -> Result<Vec<f64>> {
    let values: Vec<f64> = number_pattern()
        .find_iter(text)
        .filter_map(|m| m.as_str().parse::<f64>().ok())
        .filter(|v| v.is_finite())
        .take(horizon)
        .collect();
    if values.len() < horizon {
        return Err(Error::MalformedReply {
            expected: horizon,
            found: values.len(),
        });
    }
    Ok(values)
}

/// A text model reached through a child process: the prompt goes to stdin,
/// the reply is read from stdout.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalBackend {
    pub command: String,
    pub timeout: Duration,
}

impl ExternalBackend {
    pub fn new(command: impl Into<String>, timeout: Duration) -> Self {
        Self {
            command: command.into(),
            timeout,
        }
    }

    pub fn complete(&self, prompt: &str) -> Result<String> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(&self.command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| Error::Backend(format!("cannot start `{}`: {e}", self.command)))?;

        let mut stdin = child.stdin.take().expect("piped stdin");
        let prompt = prompt.to_owned();
        let writer = std::thread::spawn(move || {
            // a backend that ignores its input closes the pipe early
            let _ = stdin.write_all(prompt.as_bytes());
        });
        let mut stdout = child.stdout.take().expect("piped stdout");
        let reader = std::thread::spawn(move || {
            let mut out = String::new();
            stdout.read_to_string(&mut out).map(|_| out)
        });
        let mut stderr = child.stderr.take().expect("piped stderr");
        let err_reader = std::thread::spawn(move || {
            let mut err = String::new();
            let _ = stderr.read_to_string(&mut err);
            err
        });

        let started = Instant::now();
        let status = loop {
            match child.try_wait() {
                Ok(Some(status)) => break status,
                Ok(None) if started.elapsed() >= self.timeout => {
                    let _ = child.kill();
                    let _ = child.wait();
                    return Err(Error::Backend(format!(
                        "`{}` timed out after {:?}",
                        self.command, self.timeout
                    )));
                }
                Ok(None) => std::thread::sleep(Duration::from_millis(5)),
                Err(e) => return Err(Error::Backend(e.to_string())),
            }
        };
        let _ = writer.join();
        let out = reader
            .join()
            .map_err(|_| Error::Backend("stdout reader panicked".into()))?
            .map_err(|e| Error::Backend(e.to_string()))?;
        let err = err_reader.join().unwrap_or_default();
        if !status.success() {
            return Err(Error::Backend(format!(
                "`{}` exited with {status}: {}",
                self.command,
                err.trim()
            )));
        }
        Ok(out)
    }

    pub fn forecast(&self, prompt: &str, horizon: usize) -> Result<Vec<f64>> {
        parse_forecast_text(&self.complete(prompt)?, horizon)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Bandwidth {
    Fixed(f64),
    MedianHeuristic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Estimator {
    Biased,
    Unbiased,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
    pub bandwidth: Bandwidth,
    pub estimator: Estimator,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            bandwidth: Bandwidth::MedianHeuristic,
            estimator: Estimator::Biased,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::InvalidArgument(format!("lambda {} must be finite and >= 0", self.lambda)));
        }
        if let Bandwidth::Fixed(s) = self.bandwidth {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::InvalidArgument(format!("bandwidth {s} must be positive")));
            }
        }
        Ok(())
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median pairwise Euclidean distance over the pooled samples, or 1 when that
/// median is zero.
pub fn median_bandwidth(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let pooled: Vec<&[f64]> = x.iter().chain(y).map(Vec::as_slice).collect();
    let mut dists = Vec::with_capacity(pooled.len() * pooled.len().saturating_sub(1) / 2);
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            dists.push(sq_dist(pooled[i], pooled[j]).sqrt());
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    dists.sort_by(f64::total_cmp);
    let n = dists.len();
    let median = if n % 2 == 1 {
        dists[n / 2]
    } else {
        0.5 * (dists[n / 2 - 1] + dists[n / 2])
    };
    if median > 0.0 {
        median
    } else {
        1.0
    }
}

fn resolve_bandwidth(x: &[Vec<f64>], y: &[Vec<f64>], bandwidth: Bandwidth) -> f64 {
    match bandwidth {
        Bandwidth::Fixed(s) => s,
        Bandwidth::MedianHeuristic => median_bandwidth(x, y),
    }
}

fn check_samples(x: &[Vec<f64>], y: &[Vec<f64>], estimator: Estimator) -> Result<usize> {
    let min = match estimator {
        Estimator::Biased => 1,
        Estimator::Unbiased => 2,
    };
    if x.len() < min || y.len() < min {
        return Err(Error::InvalidArgument(format!(
            "{estimator:?} MMD needs at least {min} samples per side, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let dim = x[0].len();
    if x.iter().chain(y).any(|v| v.len() != dim) {
        return Err(Error::InvalidArgument("MMD samples differ in length".into()));
    }
    Ok(dim)
}

/// Mean kernel value within one sample list, optionally skipping the diagonal.
fn within_mean(x: &[Vec<f64>], gamma: f64, skip_diagonal: bool) -> f64 {
    let n = x.len();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if skip_diagonal && i == j {
                continue;
            }
            total += (-gamma * sq_dist(&x[i], &x[j])).exp();
        }
    }
    let pairs = if skip_diagonal { n * (n - 1) } else { n * n };
    total / pairs as f64
}

fn cross_mean(x: &[Vec<f64>], y: &[Vec<f64>], gamma: f64) -> f64 {
    let mut total = 0.0;
    for a in x {
        for b in y {
            total += (-gamma * sq_dist(a, b)).exp();
        }
    }
    total / (x.len() * y.len()) as f64
}

/// Squared MMD with the Gaussian kernel `exp(-|a-b|^2 / (2 sigma^2))`.
pub fn mmd2(x: &[Vec<f64>], y: &[Vec<f64>], config: &LossConfig) -> Result<f64> {
    check_samples(x, y, config.estimator)?;
    let sigma = resolve_bandwidth(x, y, config.bandwidth);
    let gamma = 1.0 / (2.0 * sigma * sigma);
    let skip = config.estimator == Estimator::Unbiased;
    // evaluate in a canonical argument order so swapping x and y is bit-exact
    let (x, y) = if sample_order(x, y) == Ordering::Greater { (y, x) } else { (x, y) };
    Ok(within_mean(x, gamma, skip) + within_mean(y, gamma, skip) - 2.0 * cross_mean(x, y, gamma))
}

fn sample_order(x: &[Vec<f64>], y: &[Vec<f64>]) -> Ordering {
    x.len().cmp(&y.len()).then_with(|| {
        x.iter()
            .flatten()
            .zip(y.iter().flatten())
            .map(|(a, b)| a.total_cmp(b))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    })
}

/// MMD^2 and its gradient with respect to each `x` sample. The bandwidth is
/// resolved from the data and then held fixed.
pub fn mmd2_with_grad(x: &[Vec<f64>], y: &[Vec<f64>], config: &LossConfig) -> Result<(f64, Vec<Vec<f64>>)> {
    let dim = check_samples(x, y, config.estimator)?;
    let value = mmd2(x, y, config)?;
    let sigma = resolve_bandwidth(x, y, config.bandwidth);
    let inv_s2 = 1.0 / (sigma * sigma);
    let gamma = 0.5 * inv_s2;
    let n = x.len();
    let m = y.len();
    let xx_weight = match config.estimator {
        Estimator::Biased => 2.0 / (n * n) as f64,
        Estimator::Unbiased => 2.0 / (n * (n - 1)) as f64,
    };
    let xy_weight = -2.0 / (n * m) as f64;

    let mut grad = vec![vec![0.0; dim]; n];
    for i in 0..n {
        // dk(a,b)/da = -k(a,b) (a - b) / sigma^2
        for j in 0..n {
            if i == j {
                continue;
            }
            let k = (-gamma * sq_dist(&x[i], &x[j])).exp();
            for t in 0..dim {
                grad[i][t] += xx_weight * (-k * (x[i][t] - x[j][t]) * inv_s2);
            }
        }
        for b in y {
            let k = (-gamma * sq_dist(&x[i], b)).exp();
            for t in 0..dim {
                grad[i][t] += xy_weight * (-k * (x[i][t] - b[t]) * inv_s2);
            }
        }
    }
    Ok((value, grad))
}

fn check_pairs(pred: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<usize> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "prediction/truth counts differ or are zero: {} vs {}",
            pred.len(),
            truth.len()
        )));
    }
    let dim = truth[0].len();
    if pred.iter().chain(truth).any(|v| v.len() != dim) {
        return Err(Error::InvalidArgument("prediction/truth lengths differ".into()));
    }
    if pred.iter().chain(truth).flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("loss input"));
    }
    Ok(dim)
}

pub fn mse(pred: &[Vec<f64>], truth: &[Vec<f64>]) -> f64 {
    let count: usize = truth.iter().map(Vec::len).sum();
    let total: f64 = pred.iter().zip(truth).map(|(p, t)| sq_dist(p, t)).sum();
    total / count.max(1) as f64
}

/// Mean squared error plus `lambda * MMD^2(pred, truth)`.
pub fn total_loss(pred: &[Vec<f64>], truth: &[Vec<f64>], config: &LossConfig) -> Result<f64> {
    check_pairs(pred, truth)?;
    let mut loss = mse(pred, truth);
    if config.lambda != 0.0 {
        loss += config.lambda * mmd2(pred, truth, config)?;
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    Ok(loss)
}

/// [`total_loss`] and its gradient with respect to each prediction.
pub fn total_loss_with_grad(
    pred: &[Vec<f64>],
    truth: &[Vec<f64>],
    config: &LossConfig,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let dim = check_pairs(pred, truth)?;
    let count = (pred.len() * dim) as f64;
    let mut loss = mse(pred, truth);
    let mut grad: Vec<Vec<f64>> = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| p.iter().zip(t).map(|(a, b)| 2.0 * (a - b) / count).collect())
        .collect();
    if config.lambda != 0.0 {
        let (m, g) = mmd2_with_grad(pred, truth, config)?;
        loss += config.lambda * m;
        for (row, grow) in grad.iter_mut().zip(g) {
            for (a, b) in row.iter_mut().zip(grow) {
                *a += config.lambda * b;
            }
        }
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    Ok((loss, grad))
}
