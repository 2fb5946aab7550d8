//! Series preprocessing: missing-value repair, channel splitting, sliding-window
//! segmentation and per-window z-normalization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to the per-window standard deviation.
pub const EPS_SCALE: f64 = 1e-8;

/// Default window length used for corpus ingestion.
pub const DEFAULT_WINDOW: usize = 512;

/// A raw series of `N` time steps and `D` channels. Entries may be missing.
///
/// Values are held channel-major: `channels[j][i]` is time step `i` of channel `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSeries {
    pub item_id: String,
    pub domain: String,
    pub start: String,
    pub freq: String,
    channels: Vec<Vec<Option<f64>>>,
}

impl RawSeries {
    pub fn new(
        item_id: impl Into<String>,
        domain: impl Into<String>,
        start: impl Into<String>,
        freq: impl Into<String>,
        channels: Vec<Vec<Option<f64>>>,
    ) -> Result<Self> {
        let series = Self {
            item_id: item_id.into(),
            domain: domain.into(),
            start: start.into(),
            freq: freq.into(),
            channels,
        };
        series.validate()?;
        Ok(series)
    }

    /// Builds a series from row-major data (`rows[i][j]` = step `i`, channel `j`).
    pub fn from_rows(
        item_id: impl Into<String>,
        domain: impl Into<String>,
        start: impl Into<String>,
        freq: impl Into<String>,
        rows: &[Vec<Option<f64>>],
    ) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::InvalidSeries("ragged rows".into()));
        }
        let channels = (0..width)
            .map(|j| rows.iter().map(|r| r[j]).collect())
            .collect();
        Self::new(item_id, domain, start, freq, channels)
    }

    /// A fully observed univariate series.
    pub fn univariate(
        item_id: impl Into<String>,
        domain: impl Into<String>,
        values: &[f64],
    ) -> Result<Self> {
        Self::new(
            item_id,
            domain,
            "-",
            "-",
            vec![values.iter().copied().map(Some).collect()],
        )
    }

    fn validate(&self) -> Result<()> {
        if self.item_id.is_empty() {
            return Err(Error::InvalidSeries("empty item_id".into()));
        }
        if self.domain.is_empty() {
            return Err(Error::InvalidSeries("empty domain".into()));
        }
        if self.channels.is_empty() {
            return Err(Error::InvalidSeries("no channels".into()));
        }
        let len = self.channels[0].len();
        if len == 0 {
            return Err(Error::InvalidSeries("no time steps".into()));
        }
        if self.channels.iter().any(|c| c.len() != len) {
            return Err(Error::InvalidSeries("channels differ in length".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn channel(&self, j: usize) -> &[Option<f64>] {
        &self.channels[j]
    }

    /// Repairs every channel with [`interpolate_missing`].
    pub fn interpolated(&self) -> Result<Self> {
        let channels = self
            .channels
            .iter()
            .map(|c| Ok(interpolate_missing(c)?.into_iter().map(Some).collect()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            channels,
            ..self.clone()
        })
    }

    /// Values of channel `j` if no entry is missing.
    pub fn dense_channel(&self, j: usize) -> Option<Vec<f64>> {
        self.channels[j].iter().copied().collect()
    }
}

/// One fixed-length segment of one channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesWindow {
    pub id: String,
    pub parent_id: String,
    pub channel: usize,
    pub offset: usize,
    pub domain: String,
    pub values: Vec<f64>,
}

impl SeriesWindow {
    pub fn new(
        parent_id: impl Into<String>,
        channel: usize,
        offset: usize,
        domain: impl Into<String>,
        values: Vec<f64>,
    ) -> Self {
        let parent_id = parent_id.into();
        Self {
            id: window_id(&parent_id, channel, offset),
            parent_id,
            channel,
            offset,
            domain: domain.into(),
            values,
        }
    }

    /// The same window with z-normalized values.
    pub fn normalized(&self) -> Self {
        let (values, _) = normalize(&self.values);
        Self {
            values,
            ..self.clone()
        }
    }
}

pub fn window_id(parent_id: &str, channel: usize, offset: usize) -> String {
    format!("{parent_id}:{channel}:{offset}")
}

/// Per-window location and scale used by [`normalize`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub loc: f64,
    pub scale: f64,
}

impl NormStats {
    pub fn denormalize(&self, values: &[f64]) -> Vec<f64> {
        values.iter().map(|v| v * self.scale + self.loc).collect()
    }

    pub fn apply(&self, values: &[f64]) -> Vec<f64> {
        values.iter().map(|v| (v - self.loc) / self.scale).collect()
    }
}

/// Fills missing entries. Interior gaps are linearly interpolated between the
/// nearest present neighbours; leading and trailing gaps take the nearest
/// present value.
pub fn interpolate_missing(values: &[Option<f64>]) -> Result<Vec<f64>> {
    let present: Vec<(usize, f64)> = values
        .iter()
        .enumerate()
        .filter_map(|(i, v)| v.map(|x| (i, x)))
        .collect();
    let (&(first_idx, first_val), &(last_idx, last_val)) = match (present.first(), present.last())
    {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(Error::Uninterpolatable),
    };

    let mut out = vec![0.0; values.len()];
    out[..first_idx].fill(first_val);
    out[last_idx..].fill(last_val);
    for pair in present.windows(2) {
        let (i0, v0) = pair[0];
        let (i1, v1) = pair[1];
        out[i0] = v0;
        let span = (i1 - i0) as f64;
        for (i, slot) in out.iter_mut().enumerate().take(i1).skip(i0 + 1) {
            let t = (i - i0) as f64 / span;
            *slot = v0 + (v1 - v0) * t;
        }
    }
    out[last_idx] = last_val;
    Ok(out)
}

/// Splits a `D`-channel series into `D` univariate series. Item ids are
/// suffixed with `_<channel>`.
pub fn split_channels(series: &RawSeries) -> Vec<RawSeries> {
    series
        .channels
        .iter()
        .enumerate()
        .map(|(j, column)| RawSeries {
            item_id: format!("{}_{j}", series.item_id),
            domain: series.domain.clone(),
            start: series.start.clone(),
            freq: series.freq.clone(),
            channels: vec![column.clone()],
        })
        .collect()
}

/// Start offsets of the windows of length `window` taken every `stride` steps.
pub fn window_offsets(len: usize, window: usize, stride: usize) -> Result<Vec<usize>> {
    if window == 0 || stride == 0 {
        return Err(Error::InvalidArgument(
            "window and stride must be positive".into(),
        ));
    }
    if window > len {
        return Err(Error::SeriesShorterThanWindow { len, window });
    }
    Ok((0..=(len - window) / stride).map(|k| k * stride).collect())
}

/// Segments a univariate series into windows `[k*s, k*s + w)`.
///
/// Produces `floor((N - w) / s) + 1` windows; a tail shorter than the stride
/// is dropped.
pub fn segment_windows(series: &RawSeries, window: usize, stride: usize) -> Result<Vec<SeriesWindow>> {
    if series.num_channels() != 1 {
        return Err(Error::InvalidSeries(format!(
            "expected a univariate series, got {} channels",
            series.num_channels()
        )));
    }
    let values = series.dense_channel(0).ok_or_else(|| {
        Error::InvalidSeries(format!("{} has missing values", series.item_id))
    })?;
    let offsets = window_offsets(values.len(), window, stride)?;
    Ok(offsets
        .into_iter()
        .map(|offset| {
            SeriesWindow::new(
                series.item_id.clone(),
                0,
                offset,
                series.domain.clone(),
                values[offset..offset + window].to_vec(),
            )
        })
        .collect())
}

/// Z-normalizes a window with the population standard deviation, floored at
/// [`EPS_SCALE`].
pub fn normalize(window: &[f64]) -> (Vec<f64>, NormStats) {
    let stats = norm_stats(window);
    (stats.apply(window), stats)
}

pub fn norm_stats(window: &[f64]) -> NormStats {
    let n = window.len().max(1) as f64;
    let loc = window.iter().sum::<f64>() / n;
    let var = window.iter().map(|x| (x - loc) * (x - loc)).sum::<f64>() / n;
    NormStats {
        loc,
        scale: var.sqrt().max(EPS_SCALE),
    }
}
