//! Hybrid hierarchical top-K retrieval over a [`SeriesTree`].
//!
//! Search ranks cluster prototypes by [`similarity`], fully scans the members
//! of the best `probes` clusters and keeps the top `k`. The hybrid search
//! splits `k` into a domain-local arm and a global arm.

use std::cmp::Ordering;
use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index::{ClusterNode, SeriesTree};
use crate::series::SeriesWindow;

/// Regularizer added to norms and distances in [`similarity`].
pub const EPS_SIM: f64 = 1e-8;

pub const DEFAULT_K: usize = 8;
pub const DEFAULT_RHO: f64 = 0.6;
pub const DEFAULT_PROBES: usize = 4;

/// Cosine similarity plus inverse Euclidean distance.
pub fn similarity(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    let mut d2 = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
        d2 += (x - y) * (x - y);
    }
    let cos = dot / (na.sqrt() * nb.sqrt() + EPS_SIM);
    cos + 1.0 / (d2.sqrt() + EPS_SIM)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    /// Z-normalized target window.
    pub target: Vec<f64>,
    pub domain: Option<String>,
    pub k: usize,
    pub rho: f64,
    pub probes: usize,
    /// Windows cut from this parent series are never returned.
    #[serde(default)]
    pub exclude_parent: Option<String>,
}

impl Query {
    pub fn new(target: Vec<f64>) -> Self {
        Self {
            target,
            domain: None,
            k: DEFAULT_K,
            rho: DEFAULT_RHO,
            probes: DEFAULT_PROBES,
            exclude_parent: None,
        }
    }

    pub fn with_domain(mut self, domain: impl Into<String>) -> Self {
        self.domain = Some(domain.into());
        self
    }

    pub fn with_k(mut self, k: usize) -> Self {
        self.k = k;
        self
    }

    pub fn with_rho(mut self, rho: f64) -> Self {
        self.rho = rho;
        self
    }

    pub fn with_probes(mut self, probes: usize) -> Self {
        self.probes = probes;
        self
    }

    pub fn excluding_parent(mut self, parent: impl Into<String>) -> Self {
        self.exclude_parent = Some(parent.into());
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::InvalidArgument(format!("rho {} not in [0, 1]", self.rho)));
        }
        if self.probes == 0 {
            return Err(Error::InvalidArgument("probes must be at least 1".into()));
        }
        if self.target.is_empty() {
            return Err(Error::InvalidArgument("empty query target".into()));
        }
        Ok(())
    }

    fn admits(&self, w: &SeriesWindow) -> bool {
        self.exclude_parent.as_deref() != Some(w.parent_id.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arm {
    Local,
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub window_id: String,
    /// Arena index of the window in the tree (or slice position for the oracle).
    pub index: usize,
    pub score: f64,
    pub domain: String,
    pub arm: Arm,
}

/// Similarity evaluations and clusters probed by one retrieval.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchCost {
    pub distance_evals: usize,
    pub clusters_probed: usize,
}

impl std::ops::AddAssign for SearchCost {
    fn add_assign(&mut self, rhs: Self) {
        self.distance_evals += rhs.distance_evals;
        self.clusters_probed += rhs.clusters_probed;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Retrieval {
    pub hits: Vec<Hit>,
    pub cost: SearchCost,
}

impl Retrieval {
    pub fn ids(&self) -> Vec<&str> {
        self.hits.iter().map(|h| h.window_id.as_str()).collect()
    }

    pub fn count(&self, arm: Arm) -> usize {
        self.hits.iter().filter(|h| h.arm == arm).count()
    }
}

/// Descending score, then ascending window id.
fn rank(a: &Hit, b: &Hit) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.window_id.cmp(&b.window_id))
}

fn top_k(mut hits: Vec<Hit>, k: usize) -> Vec<Hit> {
    if hits.len() > k {
        hits.select_nth_unstable_by(k - 1, rank);
        hits.truncate(k);
    }
    hits.sort_by(rank);
    hits
}

fn search_clusters<'a>(
    tree: &SeriesTree,
    clusters: impl Iterator<Item = (&'a str, &'a ClusterNode)>,
    query: &Query,
    k: usize,
    exclude: &HashSet<usize>,
    arm: Arm,
) -> Retrieval {
    let mut cost = SearchCost::default();
    let mut ranked: Vec<(f64, usize, &ClusterNode)> = clusters
        .enumerate()
        .map(|(pos, (_, c))| {
            cost.distance_evals += 1;
            (similarity(&query.target, &tree.window(c.prototype).values), pos, c)
        })
        .collect();
    ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)));

    let mut hits = Vec::new();
    for &(_, _, cluster) in ranked.iter().take(query.probes) {
        cost.clusters_probed += 1;
        for &m in &cluster.members {
            let w = tree.window(m);
            if exclude.contains(&m) || !query.admits(w) {
                continue;
            }
            cost.distance_evals += 1;
            hits.push(Hit {
                window_id: w.id.clone(),
                index: m,
                score: similarity(&query.target, &w.values),
                domain: w.domain.clone(),
                arm,
            });
        }
    }
    Retrieval {
        hits: if k == 0 { Vec::new() } else { top_k(hits, k) },
        cost,
    }
}

fn check_query(query: &Query, tree: &SeriesTree) -> Result<()> {
    query.validate()?;
    if tree.is_empty() {
        return Err(Error::InvalidArgument("tree is empty".into()));
    }
    if query.target.len() != tree.window_len() {
        return Err(Error::LengthMismatch {
            expected: tree.window_len(),
            actual: query.target.len(),
        });
    }
    Ok(())
}

/// Ranks every prototype in the tree and scans the best `probes` clusters.
pub fn retrieve_global(query: &Query, tree: &SeriesTree) -> Result<Retrieval> {
    check_query(query, tree)?;
    Ok(search_clusters(tree, tree.clusters(), query, query.k, &HashSet::new(), Arm::Global))
}

/// Hybrid retrieval: `round(rho * k)` hits from the query's domain subtree and
/// the rest from a global search that skips windows already taken locally.
/// Falls back to [`retrieve_global`] when the domain is unset or unknown.
pub fn retrieve_topk(query: &Query, tree: &SeriesTree) -> Result<Retrieval> {
    check_query(query, tree)?;
    let Some(node) = query.domain.as_deref().and_then(|d| tree.domain(d).map(|n| (d, n))) else {
        return retrieve_global(query, tree);
    };
    let (domain, node) = node;
    let k_local = local_count(query.k, query.rho);
    let k_global = query.k - k_local;

    let mut out = Retrieval {
        hits: Vec::new(),
        cost: SearchCost::default(),
    };
    let mut taken = HashSet::new();
    if k_local > 0 {
        let local = search_clusters(
            tree,
            node.clusters.iter().map(|c| (domain, c)),
            query,
            k_local,
            &taken,
            Arm::Local,
        );
        taken.extend(local.hits.iter().map(|h| h.index));
        out.hits.extend(local.hits);
        out.cost += local.cost;
    }
    if k_global > 0 {
        let global = search_clusters(tree, tree.clusters(), query, k_global, &taken, Arm::Global);
        out.hits.extend(global.hits);
        out.cost += global.cost;
    }
    out.hits.sort_by(rank);
    Ok(out)
}

/// Number of hits taken from the domain-local arm.
pub fn local_count(k: usize, rho: f64) -> usize {
    ((rho * k as f64).round() as usize).min(k)
}

/// Exact top-k by exhaustive scan.
pub fn linear_scan_oracle(query: &Query, windows: &[SeriesWindow]) -> Result<Retrieval> {
    query.validate()?;
    if windows.is_empty() {
        return Err(Error::InvalidArgument("no windows to scan".into()));
    }
    let mut cost = SearchCost::default();
    let hits = windows
        .iter()
        .enumerate()
        .filter(|(_, w)| query.admits(w))
        .map(|(i, w)| {
            cost.distance_evals += 1;
            Hit {
                window_id: w.id.clone(),
                index: i,
                score: similarity(&query.target, &w.values),
                domain: w.domain.clone(),
                arm: Arm::Global,
            }
        })
        .collect();
    Ok(Retrieval {
        hits: top_k(hits, query.k),
        cost,
    })
}

/// Fraction of the oracle's hits present in `found`.
pub fn recall(found: &Retrieval, exact: &Retrieval) -> f64 {
    if exact.hits.is_empty() {
        return 1.0;
    }
    let got: HashSet<&str> = found.hits.iter().map(|h| h.window_id.as_str()).collect();
    let matched = exact
        .hits
        .iter()
        .filter(|h| got.contains(h.window_id.as_str()))
        .count();
    matched as f64 / exact.hits.len() as f64
}
