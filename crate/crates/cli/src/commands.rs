//! One function per subcommand. Each returns structured output; rendering
//! lives next to the types.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use chronorag_core::coherer::ExternalBackend;
use chronorag_core::hhtr::{linear_scan_oracle, recall, retrieve_global, retrieve_topk, Arm, Query, Retrieval};
use chronorag_core::index::SeriesTree;
use chronorag_core::series::{normalize, SeriesWindow};
use chronorag_core::storage::{ingest_csv, read_store, write_store, StoreRecord};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::forecast::{build_examples, score_with_backend, train_and_score, ForecastReport};
use crate::synth::{shared_motif_benchmark, BenchmarkConfig};

/// Ingests CSV files into a store, appending to it when it already exists.
/// Returns the number of records written by this call.
pub fn cmd_ingest(csvs: &[PathBuf], domain: &str, freq: &str, out: &Path) -> Result<usize, CliError> {
    if csvs.is_empty() {
        return Err(CliError::Usage("no CSV files given".into()));
    }
    if domain.is_empty() {
        return Err(CliError::Usage("domain must be non-empty".into()));
    }
    let mut records = if out.exists() { read_store(out)? } else { Vec::new() };
    let before = records.len();
    for path in csvs {
        records.extend(ingest_csv(path, domain, freq)?);
    }
    write_store(&records, out)?;
    Ok(records.len() - before)
}

pub fn read_stores(stores: &[PathBuf]) -> Result<Vec<StoreRecord>, CliError> {
    if stores.is_empty() {
        return Err(CliError::Usage("no stores given".into()));
    }
    let mut out = Vec::new();
    for path in stores {
        out.extend(read_store(path)?);
    }
    Ok(out)
}

/// Z-normalized windows of every record. Records shorter than the window are
/// skipped.
pub fn store_windows(records: &[StoreRecord], cfg: &RunConfig) -> Result<Vec<SeriesWindow>, CliError> {
    let mut out = Vec::new();
    for r in records {
        if r.target.len() < cfg.window {
            continue;
        }
        out.extend(r.windows(cfg.window, cfg.stride)?.iter().map(SeriesWindow::normalized));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuildSummary {
    pub windows: usize,
    pub domains: Vec<(String, Vec<usize>)>,
}

impl BuildSummary {
    pub fn from_tree(tree: &SeriesTree) -> Self {
        Self {
            windows: tree.len(),
            domains: tree.summary(),
        }
    }

    pub fn clusters(&self) -> usize {
        self.domains.iter().map(|(_, sizes)| sizes.len()).sum()
    }
}

impl fmt::Display for BuildSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{} windows, {} domains, {} clusters",
            self.windows,
            self.domains.len(),
            self.clusters()
        )?;
        for (domain, sizes) in &self.domains {
            let sizes: Vec<String> = sizes.iter().map(usize::to_string).collect();
            writeln!(f, "  {domain}: {} clusters, sizes [{}]", sizes.len(), sizes.join(", "))?;
        }
        Ok(())
    }
}

pub fn cmd_build(stores: &[PathBuf], cfg: &RunConfig, out: &Path) -> Result<BuildSummary, CliError> {
    cfg.validate()?;
    let records = read_stores(stores)?;
    let windows = store_windows(&records, cfg)?;
    if windows.is_empty() {
        return Err(CliError::Usage(format!(
            "no series of length >= {} in the given stores",
            cfg.window
        )));
    }
    let tree = SeriesTree::build(windows, cfg.tree_config())?;
    tree.save(out)?;
    Ok(BuildSummary::from_tree(&tree))
}

/// Where a query target comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum QueryTarget {
    /// Last `window` values of the first channel of a CSV file.
    Csv(PathBuf),
    Values(Vec<f64>),
}

pub fn parse_values(text: &str) -> Result<Vec<f64>, CliError> {
    text.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| CliError::Usage(format!("`{v}` is not a finite number")))
        })
        .collect()
}

fn resolve_target(target: &QueryTarget, window: usize) -> Result<Vec<f64>, CliError> {
    let values = match target {
        QueryTarget::Values(v) => v.clone(),
        QueryTarget::Csv(path) => {
            let records = ingest_csv(path, "query", "-")?;
            let first = records
                .into_iter()
                .next()
                .ok_or_else(|| CliError::Usage(format!("{} has no numeric column", path.display())))?;
            first.target
        }
    };
    if values.len() < window {
        return Err(CliError::Usage(format!(
            "query has {} values, the tree needs {window}",
            values.len()
        )));
    }
    Ok(values[values.len() - window..].to_vec())
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryOutcome {
    pub retrieval: Retrieval,
    pub machine: bool,
}

impl fmt::Display for QueryOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (rank, h) in self.retrieval.hits.iter().enumerate() {
            if self.machine {
                writeln!(f, "{},{:.6},{}", h.window_id, h.score, h.domain)?;
            } else {
                let arm = match h.arm {
                    Arm::Local => "local",
                    Arm::Global => "global",
                };
                writeln!(
                    f,
                    "{:>3}. {}  score={:.6}  domain={}  arm={arm}",
                    rank + 1,
                    h.window_id,
                    h.score,
                    h.domain
                )?;
            }
        }
        if !self.machine {
            writeln!(
                f,
                "{} hits ({} local, {} global), {} similarity evaluations, {} clusters probed",
                self.retrieval.hits.len(),
                self.retrieval.count(Arm::Local),
                self.retrieval.count(Arm::Global),
                self.retrieval.cost.distance_evals,
                self.retrieval.cost.clusters_probed
            )?;
        }
        Ok(())
    }
}

pub fn cmd_query(
    tree_path: &Path,
    target: &QueryTarget,
    domain: Option<&str>,
    cfg: &RunConfig,
    machine: bool,
) -> Result<QueryOutcome, CliError> {
    cfg.validate()?;
    let tree = SeriesTree::load(tree_path)?;
    let raw = resolve_target(target, tree.window_len())?;
    let mut q = Query::new(normalize(&raw).0)
        .with_k(cfg.k)
        .with_rho(cfg.rho)
        .with_probes(cfg.probes);
    if let Some(d) = domain {
        q = q.with_domain(d);
    }
    Ok(QueryOutcome {
        retrieval: retrieve_topk(&q, &tree)?,
        machine,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct InsertSummary {
    pub inserted: usize,
    pub domains_created: usize,
    pub splits: usize,
    pub clusters: usize,
}

impl fmt::Display for InsertSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{} windows inserted, {} new domains, {} cluster splits, {} clusters total",
            self.inserted, self.domains_created, self.splits, self.clusters
        )
    }
}

/// Inserts every window of the given stores into an existing tree and writes
/// the result to `out`.
pub fn cmd_insert(tree_path: &Path, stores: &[PathBuf], cfg: &RunConfig, out: &Path) -> Result<InsertSummary, CliError> {
    cfg.validate()?;
    let mut tree = SeriesTree::load(tree_path)?;
    if tree.window_len() != cfg.window {
        return Err(CliError::Usage(format!(
            "tree windows have length {}, config window is {}",
            tree.window_len(),
            cfg.window
        )));
    }
    let records = read_stores(stores)?;
    let mut summary = InsertSummary::default();
    for w in store_windows(&records, cfg)? {
        let outcome = tree.insert(w)?;
        summary.inserted += 1;
        summary.domains_created += usize::from(outcome.domain_created);
        summary.splits += usize::from(outcome.split_into > 1);
    }
    summary.clusters = tree.cluster_count();
    tree.save(out)?;
    Ok(summary)
}

pub const EVAL_HEADER: &str = "probes,k,queries,recall,mean_distance_evals,oracle_distance_evals,mean_query_us";

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub probes: usize,
    pub all: bool,
    pub k: usize,
    pub queries: usize,
    pub recall: f64,
    pub mean_evals: f64,
    pub oracle_evals: f64,
    pub mean_query_us: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{EVAL_HEADER}\n");
        for r in &self.rows {
            let probes = if r.all { "all".to_string() } else { r.probes.to_string() };
            out.push_str(&format!(
                "{probes},{},{},{:.6},{:.2},{:.2},{:.2}\n",
                r.k, r.queries, r.recall, r.mean_evals, r.oracle_evals, r.mean_query_us
            ));
        }
        out
    }
}

/// `None` stands for "probe every cluster".
pub fn parse_probe_sweep(text: &str) -> Result<Vec<Option<usize>>, CliError> {
    text.split(',')
        .map(|p| match p.trim() {
            "all" => Ok(None),
            n => n
                .parse::<usize>()
                .ok()
                .filter(|&v| v > 0)
                .map(Some)
                .ok_or_else(|| CliError::Usage(format!("bad probes value `{n}`"))),
        })
        .collect()
}

pub fn parse_k_sweep(text: &str) -> Result<Vec<usize>, CliError> {
    text.split(',')
        .map(|k| {
            k.trim()
                .parse::<usize>()
                .ok()
                .filter(|&v| v > 0)
                .ok_or_else(|| CliError::Usage(format!("bad k value `{k}`")))
        })
        .collect()
}

/// Recall and cost of global retrieval against the exhaustive oracle for
/// every `(probes, k)` pair. Queries run in parallel against the read-only
/// tree.
pub fn evaluate(tree: &SeriesTree, queries: &[Vec<f64>], probes: &[Option<usize>], ks: &[usize]) -> Result<EvalReport, CliError> {
    if queries.is_empty() {
        return Err(CliError::Usage("no queries".into()));
    }
    let mut rows = Vec::new();
    for &k in ks {
        let exact: Vec<Retrieval> = queries
            .par_iter()
            .map(|q| linear_scan_oracle(&Query::new(q.clone()).with_k(k), tree.windows()))
            .collect::<Result<_, _>>()?;
        for &p in probes {
            let n_probes = p.unwrap_or(tree.cluster_count()).max(1);
            let results: Vec<(Retrieval, f64)> = queries
                .par_iter()
                .map(|q| {
                    let query = Query::new(q.clone()).with_k(k).with_probes(n_probes);
                    let start = Instant::now();
                    let r = retrieve_global(&query, tree)?;
                    Ok((r, start.elapsed().as_secs_f64() * 1e6))
                })
                .collect::<Result<_, chronorag_core::Error>>()?;
            let n = queries.len() as f64;
            rows.push(EvalRow {
                probes: n_probes,
                all: p.is_none(),
                k,
                queries: queries.len(),
                recall: results.iter().zip(&exact).map(|((r, _), e)| recall(r, e)).sum::<f64>() / n,
                mean_evals: results.iter().map(|(r, _)| r.cost.distance_evals as f64).sum::<f64>() / n,
                oracle_evals: exact.iter().map(|e| e.cost.distance_evals as f64).sum::<f64>() / n,
                mean_query_us: results.iter().map(|(_, t)| t).sum::<f64>() / n,
            });
        }
    }
    Ok(EvalReport { rows })
}

/// Draws `n` query windows (seeded) from the stores and evaluates the tree.
pub fn cmd_eval(
    tree_path: &Path,
    stores: &[PathBuf],
    n_queries: usize,
    probes: &[Option<usize>],
    ks: &[usize],
    cfg: &RunConfig,
) -> Result<EvalReport, CliError> {
    cfg.validate()?;
    if n_queries == 0 || probes.is_empty() || ks.is_empty() {
        return Err(CliError::Usage("need at least one query, probes value and k".into()));
    }
    let tree = SeriesTree::load(tree_path)?;
    let eval_cfg = RunConfig {
        window: tree.window_len(),
        ..cfg.clone()
    };
    let pool = store_windows(&read_stores(stores)?, &eval_cfg)?;
    if pool.is_empty() {
        return Err(CliError::Usage("stores yield no query windows".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let picks = sample(&mut rng, pool.len(), n_queries.min(pool.len()));
    let queries: Vec<Vec<f64>> = picks.iter().map(|i| pool[i].values.clone()).collect();
    evaluate(&tree, &queries, probes, ks)
}

#[derive(Debug, Clone, PartialEq)]
pub enum ForecastMode {
    Rag,
    Ablate,
    External(ExternalBackend),
}

/// Parses `external:<shell command>`.
pub fn parse_backend(arg: &str, timeout: std::time::Duration) -> Result<ExternalBackend, CliError> {
    match arg.strip_prefix("external:") {
        Some(cmd) if !cmd.trim().is_empty() => Ok(ExternalBackend::new(cmd, timeout)),
        _ => Err(CliError::Usage(format!(
            "backend must look like `external:<command>`, got `{arg}`"
        ))),
    }
}

/// Trains and scores (or, for an external backend, scores only) on the
/// stores' series. The trained model is written to `model_out` when given.
pub fn cmd_forecast(
    tree_path: Option<&Path>,
    stores: &[PathBuf],
    cfg: &RunConfig,
    mode: &ForecastMode,
    model_out: Option<&Path>,
) -> Result<ForecastReport, CliError> {
    cfg.validate()?;
    let records = read_stores(stores)?;
    let tree = match (mode, tree_path) {
        (ForecastMode::Ablate, _) => None,
        (_, Some(path)) => Some(SeriesTree::load(path)?),
        (_, None) => return Err(CliError::Usage("retrieval needs --tree (or pass --ablate-rag)".into())),
    };
    let examples = build_examples(&records, tree.as_ref(), cfg)?;
    let report = match mode {
        ForecastMode::Rag => train_and_score(&examples, cfg, false)?,
        ForecastMode::Ablate => train_and_score(&examples, cfg, true)?,
        ForecastMode::External(backend) => score_with_backend(&examples, backend, cfg)?,
    };
    if let (Some(path), Some(model)) = (model_out, &report.model) {
        model.save(path)?;
    }
    Ok(report)
}

pub fn cmd_stats(path: &Path) -> Result<String, CliError> {
    let name = path.to_string_lossy();
    if name.ends_with(chronorag_core::storage::STORE_EXTENSION) || name.ends_with(".jsonl") {
        let records = read_store(path)?;
        let mut domains: std::collections::BTreeMap<&str, (usize, usize)> = Default::default();
        for r in &records {
            let e = domains.entry(r.domain_category.as_str()).or_default();
            e.0 += 1;
            e.1 += r.target.len();
        }
        let mut out = format!("store {}: {} records\n", path.display(), records.len());
        for (d, (n, points)) in domains {
            out.push_str(&format!("  {d}: {n} records, {points} points\n"));
        }
        return Ok(out);
    }
    let tree = SeriesTree::load(path)?;
    let summary = BuildSummary::from_tree(&tree);
    let sizes: Vec<usize> = summary.domains.iter().flat_map(|(_, s)| s.iter().copied()).collect();
    let max = sizes.iter().copied().max().unwrap_or(0);
    let min = sizes.iter().copied().min().unwrap_or(0);
    Ok(format!(
        "tree {}: window {}, cap {}, seed {}\n{summary}cluster sizes: min {min}, max {max}\n",
        path.display(),
        tree.window_len(),
        tree.cap(),
        tree.seed()
    ))
}

/// Writes the shared-motif benchmark as `kb.crb.jsonl` and `targets.crb.jsonl`.
pub fn cmd_synth(out_dir: &Path, cfg: &BenchmarkConfig) -> Result<(PathBuf, PathBuf), CliError> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Data(chronorag_core::Error::Io { path: out_dir.to_path_buf(), source: e }))?;
    let bench = shared_motif_benchmark(cfg);
    let kb = out_dir.join("kb.crb.jsonl");
    let targets = out_dir.join("targets.crb.jsonl");
    write_store(&bench.kb, &kb)?;
    write_store(&bench.targets, &targets)?;
    Ok((kb, targets))
}
