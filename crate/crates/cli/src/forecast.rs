//! Chronological train/val/test forecasting with and without retrieval.

use std::fmt::Write as _;

use chronorag_core::coherer::{build_prompt, ExternalBackend, PromptMetadata};
use chronorag_core::hhtr::{retrieve_topk, Hit, Query};
use chronorag_core::index::SeriesTree;
use chronorag_core::model::{train, ForecastModel, Sample, TrainReport};
use chronorag_core::msil::{raw_mean, raw_product};
use chronorag_core::series::{normalize, NormStats};
use chronorag_core::storage::StoreRecord;

use crate::config::RunConfig;
use crate::error::CliError;

pub const SPLITS: [&str; 3] = ["train", "val", "test"];
pub const REPORT_HEADER: &str = "split,samples,mse";

/// A sample plus what is needed to score it in the original scale.
#[derive(Debug, Clone)]
pub struct Example {
    pub sample: Sample,
    pub hits: Vec<Hit>,
    pub stats: NormStats,
    pub raw_truth: Vec<f64>,
    pub domain: String,
    pub item_id: String,
    pub freq: String,
}

/// Chronological 60/20/20 boundaries for a series of length `n`.
pub fn split_bounds(n: usize) -> [(usize, usize); 3] {
    let a = n * 6 / 10;
    let b = n * 8 / 10;
    [(0, a), (a, b), (b, n)]
}

/// Forecast origins whose horizon lies entirely inside `[lo, hi)`. Origins
/// step by the horizon so targets do not overlap.
pub fn origins(lo: usize, hi: usize, window: usize, horizon: usize) -> Vec<usize> {
    let first = lo.max(window);
    if first + horizon > hi {
        return Vec::new();
    }
    (first..=hi - horizon).step_by(horizon).collect()
}

/// Builds the examples of every split. Retrieval runs once per example; with
/// `tree` unset the examples carry no retrieved series.
pub fn build_examples(
    records: &[StoreRecord],
    tree: Option<&SeriesTree>,
    cfg: &RunConfig,
) -> Result<[Vec<Example>; 3], CliError> {
    if let Some(tree) = tree {
        if tree.window_len() != cfg.window {
            return Err(CliError::Usage(format!(
                "tree windows have length {}, config window is {}",
                tree.window_len(),
                cfg.window
            )));
        }
    }
    let mut out: [Vec<Example>; 3] = Default::default();
    for rec in records {
        rec.validate()?;
        let x = &rec.target;
        for (split, &(lo, hi)) in split_bounds(x.len()).iter().enumerate() {
            for p in origins(lo, hi, cfg.window, cfg.horizon) {
                let (t_norm, stats) = normalize(&x[p - cfg.window..p]);
                let raw_truth = x[p..p + cfg.horizon].to_vec();
                let truth = stats.apply(&raw_truth);
                let hits = match tree {
                    Some(tree) => {
                        let q = Query::new(t_norm.clone())
                            .with_domain(rec.domain_category.clone())
                            .with_k(cfg.k)
                            .with_rho(cfg.rho)
                            .with_probes(cfg.probes)
                            .excluding_parent(rec.item_id.clone());
                        retrieve_topk(&q, tree)?.hits
                    }
                    None => Vec::new(),
                };
                let retrieved = match tree {
                    Some(tree) => hits.iter().map(|h| tree.window(h.index).values.clone()).collect(),
                    None => Vec::new(),
                };
                out[split].push(Example {
                    sample: Sample {
                        t_norm,
                        retrieved,
                        truth,
                    },
                    hits,
                    stats,
                    raw_truth,
                    domain: rec.domain_category.clone(),
                    item_id: rec.item_id.clone(),
                    freq: rec.freq.clone(),
                });
            }
        }
    }
    if out[0].is_empty() {
        return Err(CliError::Usage(format!(
            "no training samples: series too short for window {} + horizon {}",
            cfg.window, cfg.horizon
        )));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitScore {
    pub split: &'static str,
    pub samples: usize,
    pub mse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastReport {
    pub scores: Vec<SplitScore>,
    pub model: Option<ForecastModel>,
    pub training: Option<TrainReport>,
}

impl ForecastReport {
    pub fn mse(&self, split: &str) -> Option<f64> {
        self.scores.iter().find(|s| s.split == split).map(|s| s.mse)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{REPORT_HEADER}\n");
        for s in &self.scores {
            let _ = writeln!(out, "{},{},{:?}", s.split, s.samples, s.mse);
        }
        out
    }
}

/// Mean squared error in the original scale.
fn original_scale_mse<F>(examples: &[Example], mut predict: F) -> Result<f64, CliError>
where
    F: FnMut(&Example) -> Result<Vec<f64>, CliError>,
{
    let mut total = 0.0;
    let mut count = 0usize;
    for ex in examples {
        let pred = ex.stats.denormalize(&predict(ex)?);
        total += pred
            .iter()
            .zip(&ex.raw_truth)
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>();
        count += pred.len();
    }
    Ok(if count == 0 { f64::NAN } else { total / count as f64 })
}

/// Trains fusion + head on the train split (best validation epoch kept) and
/// scores every split. With `ablate` the residual path is forced to zero.
pub fn train_and_score(examples: &[Vec<Example>; 3], cfg: &RunConfig, ablate: bool) -> Result<ForecastReport, CliError> {
    let samples: Vec<Vec<Sample>> = examples
        .iter()
        .map(|split| split.iter().map(|e| e.sample.clone()).collect())
        .collect();
    let mut model = ForecastModel::init(cfg.window, cfg.horizon, cfg.d, cfg.h, cfg.seed);
    let training = train(
        &mut model,
        &samples[0],
        &samples[1],
        &cfg.loss_config(),
        &cfg.train_config(),
        ablate,
    )?;
    let mut scores = Vec::with_capacity(3);
    for (split, exs) in SPLITS.iter().zip(examples) {
        let mse = original_scale_mse(exs, |e| Ok(model.predict(&e.sample, ablate)?))?;
        scores.push(SplitScore {
            split,
            samples: exs.len(),
            mse,
        });
    }
    Ok(ForecastReport {
        scores,
        model: Some(model),
        training: Some(training),
    })
}

pub fn prompt_for(example: &Example, horizon: usize) -> Result<String, CliError> {
    let s = &example.sample;
    let (mean, product) = if s.retrieved.is_empty() {
        (Vec::new(), Vec::new())
    } else {
        (raw_mean(&s.retrieved)?, raw_product(&s.retrieved)?)
    };
    let meta = PromptMetadata {
        item_id: example.item_id.clone(),
        domain: example.domain.clone(),
        freq: example.freq.clone(),
    };
    Ok(build_prompt(&s.t_norm, &mean, &product, &example.hits, &meta, horizon))
}

/// Scores the test split with a text backend. Nothing is trained.
pub fn score_with_backend(
    examples: &[Vec<Example>; 3],
    backend: &ExternalBackend,
    cfg: &RunConfig,
) -> Result<ForecastReport, CliError> {
    let test = &examples[2];
    let mse = original_scale_mse(test, |e| {
        let prompt = prompt_for(e, cfg.horizon)?;
        backend.forecast(&prompt, cfg.horizon).map_err(|err| match err {
            chronorag_core::Error::MalformedReply { .. } => CliError::Backend(err.to_string()),
            other => other.into(),
        })
    })?;
    Ok(ForecastReport {
        scores: vec![SplitScore {
            split: "test",
            samples: test.len(),
            mse,
        }],
        model: None,
        training: None,
    })
}
