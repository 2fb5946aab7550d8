//! Trainable forecaster: MSIL fusion feeding a linear head, trained with the
//! MSE + MMD objective.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::coherer::{total_loss, total_loss_with_grad, LinearHead, LossConfig};
use crate::error::{Error, Result};
use crate::msil::{msil_backward, msil_forward, FusionParams, Mlp};

const CHECKPOINT_HEADER: &str = "chronorag-model v1";

/// One training or evaluation example, all in the target window's normalized
/// space.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub t_norm: Vec<f64>,
    pub retrieved: Vec<Vec<f64>>,
    pub truth: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastModel {
    pub fusion: FusionParams,
    pub head: LinearHead,
}

impl ForecastModel {
    pub fn init(context: usize, horizon: usize, d: usize, h: usize, seed: u64) -> Self {
        Self {
            fusion: FusionParams::init(d, h, seed),
            head: LinearHead::init(context, horizon, seed.wrapping_add(1)),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            fusion: self.fusion.zeros_like(),
            head: LinearHead::zeros(self.head.context, self.head.horizon),
        }
    }

    pub fn num_params(&self) -> usize {
        self.values().count()
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.fusion.values().chain(self.head.values())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.fusion.values_mut().chain(self.head.values_mut())
    }

    pub fn validate(&self) -> Result<()> {
        self.fusion.validate()?;
        self.head.validate()
    }

    /// Residual features fed to the head. Zero when `ablate` is set or
    /// nothing was retrieved.
    pub fn fused_input(&self, sample: &Sample, ablate: bool) -> Result<Vec<f64>> {
        if ablate || sample.retrieved.is_empty() {
            return Ok(sample.t_norm.clone());
        }
        let fwd = msil_forward(&sample.t_norm, &sample.retrieved, &self.fusion)?;
        Ok(sample.t_norm.iter().zip(fwd.r_fused()).map(|(a, b)| a + b).collect())
    }

    pub fn predict(&self, sample: &Sample, ablate: bool) -> Result<Vec<f64>> {
        self.head.apply(&self.fused_input(sample, ablate)?)
    }

    pub fn loss(&self, batch: &[Sample], loss: &LossConfig, ablate: bool) -> Result<f64> {
        let preds = batch
            .iter()
            .map(|s| self.predict(s, ablate))
            .collect::<Result<Vec<_>>>()?;
        let truth: Vec<Vec<f64>> = batch.iter().map(|s| s.truth.clone()).collect();
        total_loss(&preds, &truth, loss)
    }

    /// Batch loss and its gradient with respect to every parameter.
    pub fn loss_and_grad(&self, batch: &[Sample], loss: &LossConfig, ablate: bool) -> Result<(f64, ForecastModel)> {
        let mut forwards = Vec::with_capacity(batch.len());
        let mut inputs = Vec::with_capacity(batch.len());
        let mut preds = Vec::with_capacity(batch.len());
        for s in batch {
            let fwd = if ablate || s.retrieved.is_empty() {
                None
            } else {
                Some(msil_forward(&s.t_norm, &s.retrieved, &self.fusion)?)
            };
            let input: Vec<f64> = match &fwd {
                Some(f) => s.t_norm.iter().zip(f.r_fused()).map(|(a, b)| a + b).collect(),
                None => s.t_norm.clone(),
            };
            preds.push(self.head.apply(&input)?);
            inputs.push(input);
            forwards.push(fwd);
        }
        let truth: Vec<Vec<f64>> = batch.iter().map(|s| s.truth.clone()).collect();
        let (value, d_pred) = total_loss_with_grad(&preds, &truth, loss)?;

        let mut grad = self.zeros_like();
        for (((s, fwd), input), dp) in batch.iter().zip(&forwards).zip(&inputs).zip(&d_pred) {
            let d_input = self.head.backward(input, dp, &mut grad.head);
            if let Some(fwd) = fwd {
                msil_backward(&s.t_norm, fwd, &self.fusion, &d_input, &mut grad.fusion);
            }
        }
        Ok((value, grad))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let f = &self.fusion;
        let _ = writeln!(out, "{CHECKPOINT_HEADER}");
        let _ = writeln!(out, "fusion {} {}", f.d, f.h);
        write_row(&mut out, "w_q", &f.w_q);
        write_row(&mut out, "w_k", &f.w_k);
        write_row(&mut out, "w_v", &f.w_v);
        for (name, mlp) in [("mlp1", &f.mlp1), ("mlp2", &f.mlp2)] {
            write_row(&mut out, &format!("{name}.w1"), &mlp.w1);
            write_row(&mut out, &format!("{name}.b1"), &mlp.b1);
            write_row(&mut out, &format!("{name}.w2"), &mlp.w2);
            write_row(&mut out, &format!("{name}.b2"), &[mlp.b2]);
        }
        let _ = writeln!(out, "head {} {}", self.head.context, self.head.horizon);
        write_row(&mut out, "head.weights", &self.head.weights);
        write_row(&mut out, "head.bias", &self.head.bias);
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(CHECKPOINT_HEADER) {
            return Err(Error::Checkpoint(format!("missing `{CHECKPOINT_HEADER}` header")));
        }
        let (d, h) = read_dims(lines.next(), "fusion")?;
        let w_q = read_row(lines.next(), "w_q", d)?;
        let w_k = read_row(lines.next(), "w_k", d)?;
        let w_v = read_row(lines.next(), "w_v", d)?;
        let mut mlps = Vec::with_capacity(2);
        for name in ["mlp1", "mlp2"] {
            mlps.push(Mlp {
                w1: read_row(lines.next(), &format!("{name}.w1"), h)?,
                b1: read_row(lines.next(), &format!("{name}.b1"), h)?,
                w2: read_row(lines.next(), &format!("{name}.w2"), h)?,
                b2: read_row(lines.next(), &format!("{name}.b2"), 1)?[0],
            });
        }
        let mlp2 = mlps.pop().expect("two mlps");
        let mlp1 = mlps.pop().expect("two mlps");
        let (context, horizon) = read_dims(lines.next(), "head")?;
        let weights = read_row(lines.next(), "head.weights", context * horizon)?;
        let bias = read_row(lines.next(), "head.bias", horizon)?;
        if lines.any(|l| !l.trim().is_empty()) {
            return Err(Error::Checkpoint("trailing content".into()));
        }
        let model = Self {
            fusion: FusionParams {
                d,
                h,
                w_q,
                w_k,
                w_v,
                mlp1,
                mlp2,
            },
            head: LinearHead {
                context,
                horizon,
                weights,
                bias,
            },
        };
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

fn write_row(out: &mut String, name: &str, values: &[f64]) {
    out.push_str(name);
    for v in values {
        // `{:?}` prints the shortest representation that parses back exactly
        let _ = write!(out, " {v:?}");
    }
    out.push('\n');
}

fn read_dims(line: Option<&str>, name: &str) -> Result<(usize, usize)> {
    let line = line.ok_or_else(|| Error::Checkpoint(format!("missing `{name}` line")))?;
    let mut parts = line.split_whitespace();
    if parts.next() != Some(name) {
        return Err(Error::Checkpoint(format!("expected `{name}` line, found `{line}`")));
    }
    let mut dim = || -> Result<usize> {
        parts
            .next()
            .and_then(|p| p.parse().ok())
            .ok_or_else(|| Error::Checkpoint(format!("bad dimensions in `{line}`")))
    };
    Ok((dim()?, dim()?))
}

fn read_row(line: Option<&str>, name: &str, len: usize) -> Result<Vec<f64>> {
    let line = line.ok_or_else(|| Error::Checkpoint(format!("missing `{name}` row")))?;
    let mut parts = line.split_whitespace();
    if parts.next() != Some(name) {
        return Err(Error::Checkpoint(format!("expected `{name}` row")));
    }
    let values = parts
        .map(|p| p.parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Checkpoint(format!("`{name}`: {e}")))?;
    if values.len() != len {
        return Err(Error::Checkpoint(format!(
            "`{name}` has {} values, expected {len}",
            values.len()
        )));
    }
    Ok(values)
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64, num_params: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
        }
    }

    pub fn step(&mut self, model: &mut ForecastModel, grad: &ForecastModel) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, &g), m), v) in model
            .values_mut()
            .zip(grad.values())
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            lr: 0.01,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// Epoch whose parameters were kept (lowest validation loss).
    pub best_epoch: usize,
}

/// Mini-batch Adam over `train`; keeps the parameters with the lowest
/// validation loss. With an empty `val` the final epoch is kept.
pub fn train(
    model: &mut ForecastModel,
    train_set: &[Sample],
    val: &[Sample],
    loss: &LossConfig,
    config: &TrainConfig,
    ablate: bool,
) -> Result<TrainReport> {
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("no training samples".into()));
    }
    if config.batch_size == 0 || !(config.lr.is_finite() && config.lr > 0.0) {
        return Err(Error::InvalidArgument("batch size and learning rate must be positive".into()));
    }
    loss.validate()?;
    model.validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(config.lr, model.num_params());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut report = TrainReport {
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        best_epoch: 0,
    };
    let mut best: Option<(f64, ForecastModel)> = None;
    // an MMD term needs at least two samples per side to carry signal
    let min_batch = 2.min(train_set.len());

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < min_batch {
                continue;
            }
            let batch: Vec<Sample> = chunk.iter().map(|&i| train_set[i].clone()).collect();
            let (value, grad) = model.loss_and_grad(&batch, loss, ablate)?;
            adam.step(model, &grad);
            total += value;
            batches += 1;
        }
        report.train_loss.push(total / batches.max(1) as f64);
        if !val.is_empty() {
            let v = model.loss(val, loss, ablate)?;
            report.val_loss.push(v);
            if best.as_ref().map_or(true, |(b, _)| v < *b) {
                best = Some((v, model.clone()));
                report.best_epoch = epoch;
            }
        } else {
            report.best_epoch = epoch;
        }
    }
    if let Some((_, m)) = best {
        *model = m;
    }
    if model.values().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("trained parameters"));
    }
    Ok(report)
}
