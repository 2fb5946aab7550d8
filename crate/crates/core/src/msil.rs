//! Multi-grained series interaction: an interaction pattern (normalized
//! elementwise product of the retrieved series) and an average pattern (their
//! mean), each passed through a per-timestep MLP, then fused into the target
//! with single-head cross-attention over the time axis.
//!
//! Forward passes keep what the backward pass needs; gradients are written into
//! a [`FusionParams`] used as an accumulator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hhtr::Hit;

/// Floor on the L2 norm of the elementwise product.
pub const EPS_NORM: f64 = 1e-12;

pub const DEFAULT_EMBED_DIM: usize = 16;
pub const DEFAULT_HIDDEN: usize = 16;

/// Splits hits into those sharing the target's domain and the rest, keeping
/// their relative order.
pub fn partition_domains<'a>(target_domain: &str, hits: &'a [Hit]) -> (Vec<&'a Hit>, Vec<&'a Hit>) {
    hits.iter().partition(|h| h.domain == target_domain)
}

/// Two affine layers with a ReLU between, applied to one scalar per timestep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

impl Mlp {
    fn init(hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound2 = 1.0 / (hidden as f64).sqrt();
        Self {
            w1: (0..hidden).map(|_| rng.gen_range(-1.0..=1.0)).collect(),
            b1: (0..hidden).map(|_| rng.gen_range(-1.0..=1.0)).collect(),
            w2: (0..hidden).map(|_| rng.gen_range(-bound2..=bound2)).collect(),
            b2: rng.gen_range(-bound2..=bound2),
        }
    }

    fn zeros(hidden: usize) -> Self {
        Self {
            w1: vec![0.0; hidden],
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden],
            b2: 0.0,
        }
    }

    pub fn forward(&self, x: f64) -> f64 {
        self.w1
            .iter()
            .zip(&self.b1)
            .zip(&self.w2)
            .map(|((w1, b1), w2)| w2 * (w1 * x + b1).max(0.0))
            .sum::<f64>()
            + self.b2
    }

    pub fn apply(&self, xs: &[f64]) -> Vec<f64> {
        xs.iter().map(|&x| self.forward(x)).collect()
    }

    /// Accumulates parameter gradients for output gradient `dy` at input `x`.
    fn backward(&self, x: f64, dy: f64, grad: &mut Mlp) {
        for j in 0..self.w1.len() {
            let z = self.w1[j] * x + self.b1[j];
            let a = z.max(0.0);
            grad.w2[j] += dy * a;
            if z > 0.0 {
                let dz = dy * self.w2[j];
                grad.w1[j] += dz * x;
                grad.b1[j] += dz;
            }
        }
        grad.b2 += dy;
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.w1
            .iter()
            .chain(&self.b1)
            .chain(&self.w2)
            .chain(std::iter::once(&self.b2))
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.w1
            .iter_mut()
            .chain(self.b1.iter_mut())
            .chain(self.w2.iter_mut())
            .chain(std::iter::once(&mut self.b2))
    }
}

/// Learnable MSIL weights: per-timestep query/key/value projections into `d`
/// dimensions and the two pattern MLPs of hidden width `h`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionParams {
    pub d: usize,
    pub h: usize,
    pub w_q: Vec<f64>,
    pub w_k: Vec<f64>,
    pub w_v: Vec<f64>,
    pub mlp1: Mlp,
    pub mlp2: Mlp,
}

impl FusionParams {
    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` initialization.
    pub fn init(d: usize, h: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w_q = (0..d).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        let w_k = (0..d).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        let w_v = (0..d).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        let mlp1 = Mlp::init(h, &mut rng);
        let mlp2 = Mlp::init(h, &mut rng);
        Self {
            d,
            h,
            w_q,
            w_k,
            w_v,
            mlp1,
            mlp2,
        }
    }

    pub fn zeros(d: usize, h: usize) -> Self {
        Self {
            d,
            h,
            w_q: vec![0.0; d],
            w_k: vec![0.0; d],
            w_v: vec![0.0; d],
            mlp1: Mlp::zeros(h),
            mlp2: Mlp::zeros(h),
        }
    }

    /// `d = h = 1`, every weight 1 and every bias 0: the MLPs reduce to ReLU.
    pub fn identity() -> Self {
        let unit = Mlp {
            w1: vec![1.0],
            b1: vec![0.0],
            w2: vec![1.0],
            b2: 0.0,
        };
        Self {
            d: 1,
            h: 1,
            w_q: vec![1.0],
            w_k: vec![1.0],
            w_v: vec![1.0],
            mlp1: unit.clone(),
            mlp2: unit,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.d, self.h)
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.w_q
            .iter()
            .chain(&self.w_k)
            .chain(&self.w_v)
            .chain(self.mlp1.values())
            .chain(self.mlp2.values())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.w_q
            .iter_mut()
            .chain(self.w_k.iter_mut())
            .chain(self.w_v.iter_mut())
            .chain(self.mlp1.values_mut())
            .chain(self.mlp2.values_mut())
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.h;
        let shapes_ok = self.d >= 1
            && self.w_q.len() == self.d
            && self.w_k.len() == self.d
            && self.w_v.len() == self.d
            && [&self.mlp1, &self.mlp2]
                .iter()
                .all(|m| m.w1.len() == h && m.b1.len() == h && m.w2.len() == h);
        if !shapes_ok {
            return Err(Error::InvalidArgument("fusion parameter shapes are inconsistent".into()));
        }
        if self.values().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("fusion parameters"));
        }
        Ok(())
    }
}

/// Patterns extracted from the retrieved series.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternSet {
    pub p_int: Vec<f64>,
    pub p_avg: Vec<f64>,
    /// Elementwise product divided by its floored L2 norm.
    pub raw_product: Vec<f64>,
    /// Arithmetic mean of the retrieved series.
    pub raw_mean: Vec<f64>,
}

fn check_series<S: AsRef<[f64]>>(series: &[S]) -> Result<usize> {
    let first = series.first().ok_or(Error::NoRetrievedSeries)?;
    let len = first.as_ref().len();
    if let Some(bad) = series.iter().find(|s| s.as_ref().len() != len) {
        return Err(Error::LengthMismatch {
            expected: len,
            actual: bad.as_ref().len(),
        });
    }
    Ok(len)
}

/// Values at timestep `t` across all series, in a canonical order so that
/// reductions do not depend on the order of the retrieved list.
fn column<S: AsRef<[f64]>>(series: &[S], t: usize, buf: &mut Vec<f64>) {
    buf.clear();
    buf.extend(series.iter().map(|s| s.as_ref()[t]));
    buf.sort_by(f64::total_cmp);
}

/// Normalized elementwise product of the series.
pub fn raw_product<S: AsRef<[f64]>>(series: &[S]) -> Result<Vec<f64>> {
    let len = check_series(series)?;
    let mut buf = Vec::with_capacity(series.len());
    let product: Vec<f64> = (0..len)
        .map(|t| {
            column(series, t, &mut buf);
            buf.iter().product()
        })
        .collect();
    let norm = product.iter().map(|v| v * v).sum::<f64>().sqrt().max(EPS_NORM);
    Ok(product.into_iter().map(|v| v / norm).collect())
}

pub fn raw_mean<S: AsRef<[f64]>>(series: &[S]) -> Result<Vec<f64>> {
    let len = check_series(series)?;
    let n = series.len() as f64;
    let mut buf = Vec::with_capacity(series.len());
    Ok((0..len)
        .map(|t| {
            column(series, t, &mut buf);
            buf.iter().sum::<f64>() / n
        })
        .collect())
}

/// Returns `(p_int, raw_product)`.
pub fn interaction_pattern<S: AsRef<[f64]>>(series: &[S], params: &FusionParams) -> Result<(Vec<f64>, Vec<f64>)> {
    let raw = raw_product(series)?;
    Ok((params.mlp1.apply(&raw), raw))
}

/// Returns `(p_avg, raw_mean)`.
pub fn average_pattern<S: AsRef<[f64]>>(series: &[S], params: &FusionParams) -> Result<(Vec<f64>, Vec<f64>)> {
    let raw = raw_mean(series)?;
    Ok((params.mlp2.apply(&raw), raw))
}

pub fn extract_patterns<S: AsRef<[f64]>>(series: &[S], params: &FusionParams) -> Result<PatternSet> {
    let (p_int, raw_product) = interaction_pattern(series, params)?;
    let (p_avg, raw_mean) = average_pattern(series, params)?;
    Ok(PatternSet {
        p_int,
        p_avg,
        raw_product,
        raw_mean,
    })
}

/// Intermediate values of one cross-attention pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub len: usize,
    /// Row-stochastic `len x len` weights, row-major.
    pub weights: Vec<f64>,
    /// `weights * V`, `len x d`, row-major.
    pub context: Vec<f64>,
    pub r_fused: Vec<f64>,
}

impl Attention {
    pub fn row(&self, t: usize) -> &[f64] {
        &self.weights[t * self.len..(t + 1) * self.len]
    }
}

/// `softmax(Q K^T / sqrt(d)) V` with `Q = t_norm w_q^T`, `K = p_avg w_k^T`,
/// `V = p_int w_v^T`, projected back to one value per timestep with `w_v`.
pub fn attend(t_norm: &[f64], p_avg: &[f64], p_int: &[f64], params: &FusionParams) -> Result<Attention> {
    let w = t_norm.len();
    for other in [p_avg.len(), p_int.len()] {
        if other != w {
            return Err(Error::LengthMismatch {
                expected: w,
                actual: other,
            });
        }
    }
    let d = params.d;
    let scale = 1.0 / (d as f64).sqrt();
    let q: Vec<f64> = t_norm.iter().flat_map(|&x| params.w_q.iter().map(move |&a| x * a)).collect();
    let k: Vec<f64> = p_avg.iter().flat_map(|&x| params.w_k.iter().map(move |&a| x * a)).collect();
    let v: Vec<f64> = p_int.iter().flat_map(|&x| params.w_v.iter().map(move |&a| x * a)).collect();

    let mut weights = vec![0.0; w * w];
    for t in 0..w {
        let row = &mut weights[t * w..(t + 1) * w];
        let qt = &q[t * d..(t + 1) * d];
        for (s, slot) in row.iter_mut().enumerate() {
            let ks = &k[s * d..(s + 1) * d];
            *slot = qt.iter().zip(ks).map(|(a, b)| a * b).sum::<f64>() * scale;
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            total += *x;
        }
        row.iter_mut().for_each(|x| *x /= total);
    }

    let mut context = vec![0.0; w * d];
    for t in 0..w {
        for s in 0..w {
            let a = weights[t * w + s];
            for j in 0..d {
                context[t * d + j] += a * v[s * d + j];
            }
        }
    }
    let r_fused = (0..w)
        .map(|t| (0..d).map(|j| context[t * d + j] * params.w_v[j]).sum())
        .collect();
    Ok(Attention {
        len: w,
        weights,
        context,
        r_fused,
    })
}

pub fn cross_attention(t_norm: &[f64], p_avg: &[f64], p_int: &[f64], params: &FusionParams) -> Result<Vec<f64>> {
    Ok(attend(t_norm, p_avg, p_int, params)?.r_fused)
}

/// Full MSIL forward pass for one target.
#[derive(Debug, Clone, PartialEq)]
pub struct MsilForward {
    pub patterns: PatternSet,
    pub attention: Attention,
}

impl MsilForward {
    pub fn r_fused(&self) -> &[f64] {
        &self.attention.r_fused
    }
}

pub fn msil_forward<S: AsRef<[f64]>>(t_norm: &[f64], retrieved: &[S], params: &FusionParams) -> Result<MsilForward> {
    let patterns = extract_patterns(retrieved, params)?;
    let attention = attend(t_norm, &patterns.p_avg, &patterns.p_int, params)?;
    Ok(MsilForward {
        patterns,
        attention,
    })
}

/// Accumulates into `grad` the gradient of a scalar loss with respect to every
/// fusion parameter, given `d_r` = dLoss/dr_fused.
pub fn msil_backward(
    t_norm: &[f64],
    fwd: &MsilForward,
    params: &FusionParams,
    d_r: &[f64],
    grad: &mut FusionParams,
) {
    let w = fwd.attention.len;
    let d = params.d;
    let scale = 1.0 / (d as f64).sqrt();
    let a = &fwd.attention.weights;
    let ctx = &fwd.attention.context;
    let p_avg = &fwd.patterns.p_avg;
    let p_int = &fwd.patterns.p_int;

    // r = ctx * w_v
    let mut d_ctx = vec![0.0; w * d];
    for t in 0..w {
        for j in 0..d {
            grad.w_v[j] += ctx[t * d + j] * d_r[t];
            d_ctx[t * d + j] = d_r[t] * params.w_v[j];
        }
    }

    // ctx = A V
    let mut d_a = vec![0.0; w * w];
    let mut d_v = vec![0.0; w * d];
    for t in 0..w {
        for s in 0..w {
            let mut acc = 0.0;
            for j in 0..d {
                let v_sj = p_int[s] * params.w_v[j];
                acc += d_ctx[t * d + j] * v_sj;
                d_v[s * d + j] += a[t * w + s] * d_ctx[t * d + j];
            }
            d_a[t * w + s] = acc;
        }
    }

    // row softmax
    let mut d_s = vec![0.0; w * w];
    for t in 0..w {
        let row = &a[t * w..(t + 1) * w];
        let d_row = &d_a[t * w..(t + 1) * w];
        let dot: f64 = row.iter().zip(d_row).map(|(x, y)| x * y).sum();
        for s in 0..w {
            d_s[t * w + s] = row[s] * (d_row[s] - dot);
        }
    }

    // S = Q K^T * scale
    let mut d_p_avg = vec![0.0; w];
    for t in 0..w {
        for s in 0..w {
            let g = d_s[t * w + s] * scale;
            if g == 0.0 {
                continue;
            }
            for j in 0..d {
                let q_tj = t_norm[t] * params.w_q[j];
                let k_sj = p_avg[s] * params.w_k[j];
                // dQ[t][j] = g * K[s][j]; dK[s][j] = g * Q[t][j]
                grad.w_q[j] += t_norm[t] * g * k_sj;
                grad.w_k[j] += p_avg[s] * g * q_tj;
                d_p_avg[s] += g * q_tj * params.w_k[j];
            }
        }
    }

    // V = p_int w_v^T
    let mut d_p_int = vec![0.0; w];
    for s in 0..w {
        for j in 0..d {
            grad.w_v[j] += p_int[s] * d_v[s * d + j];
            d_p_int[s] += d_v[s * d + j] * params.w_v[j];
        }
    }

    for t in 0..w {
        params.mlp1.backward(fwd.patterns.raw_product[t], d_p_int[t], &mut grad.mlp1);
        params.mlp2.backward(fwd.patterns.raw_mean[t], d_p_avg[t], &mut grad.mlp2);
    }
}
