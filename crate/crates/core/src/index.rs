//! Hierarchical series tree: windows are grouped by domain, each domain is
//! clustered with k-means into clusters of at most `cap` members, and every
//! cluster is represented by its prototype (the member closest to the
//! centroid).
//!
//! Window storage is an arena; clusters refer to windows by arena index.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::kmeans::{self, sq_dist, KMeansConfig};
use crate::series::SeriesWindow;

pub const DEFAULT_CAP: usize = 256;
pub const TREE_EXTENSION: &str = "crbtree";

const MAGIC: &[u8; 8] = b"CRBTREE\n";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterNode {
    pub centroid: Vec<f64>,
    /// Arena index of the prototype window.
    pub prototype: usize,
    /// Arena indices of the member windows.
    pub members: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DomainNode {
    pub clusters: Vec<ClusterNode>,
}

impl DomainNode {
    pub fn len(&self) -> usize {
        self.clusters.iter().map(|c| c.members.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TreeConfig {
    pub cap: usize,
    pub seed: u64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for TreeConfig {
    fn default() -> Self {
        Self {
            cap: DEFAULT_CAP,
            seed: 0,
            max_iters: kmeans::DEFAULT_MAX_ITERS,
            tol: kmeans::DEFAULT_TOL,
        }
    }
}

/// What [`SeriesTree::insert`] did.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InsertOutcome {
    pub index: usize,
    pub domain_created: bool,
    /// Number of clusters the target cluster was split into (1 when no split).
    pub split_into: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeriesTree {
    window_len: usize,
    config: TreeConfig,
    windows: Vec<SeriesWindow>,
    by_id: HashMap<String, usize>,
    domains: BTreeMap<String, DomainNode>,
    reclusters: u64,
}

/// FNV-1a, used to derive per-domain seeds that do not depend on the std hasher.
fn stable_hash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn mean_of(windows: &[SeriesWindow], members: &[usize], dim: usize) -> Vec<f64> {
    let mut c = vec![0.0; dim];
    for &m in members {
        for (s, v) in c.iter_mut().zip(&windows[m].values) {
            *s += v;
        }
    }
    let n = members.len() as f64;
    c.iter_mut().for_each(|v| *v /= n);
    c
}

/// Member minimizing squared distance to `centroid`; ties go to the
/// lexicographically smallest window id.
pub fn select_prototype(centroid: &[f64], members: &[usize], windows: &[SeriesWindow]) -> usize {
    let mut best: Option<(usize, f64)> = None;
    for &m in members {
        let d = sq_dist(&windows[m].values, centroid);
        best = match best {
            Some((b, bd)) if bd < d || (bd == d && windows[b].id <= windows[m].id) => Some((b, bd)),
            _ => Some((m, d)),
        };
    }
    best.expect("cluster has members").0
}

impl SeriesTree {
    pub fn empty(window_len: usize, config: TreeConfig) -> Result<Self> {
        if config.cap == 0 {
            return Err(Error::InvalidArgument("cap must be at least 1".into()));
        }
        if window_len == 0 {
            return Err(Error::InvalidArgument("window length must be positive".into()));
        }
        Ok(Self {
            window_len,
            config,
            windows: Vec::new(),
            by_id: HashMap::new(),
            domains: BTreeMap::new(),
            reclusters: 0,
        })
    }

    pub fn build(windows: Vec<SeriesWindow>, config: TreeConfig) -> Result<Self> {
        let window_len = windows
            .first()
            .map(|w| w.values.len())
            .ok_or_else(|| Error::InvalidArgument("no windows to index".into()))?;
        let mut tree = Self::empty(window_len, config)?;
        let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for w in windows {
            let idx = tree.push_window(w)?;
            groups
                .entry(tree.windows[idx].domain.clone())
                .or_default()
                .push(idx);
        }

        for (domain, members) in groups {
            let clusters = tree.split_members(members, config.seed ^ stable_hash(&domain))?;
            let node = DomainNode { clusters };
            tree.domains.insert(domain, node);
        }
        Ok(tree)
    }

    fn push_window(&mut self, window: SeriesWindow) -> Result<usize> {
        if window.values.len() != self.window_len {
            return Err(Error::LengthMismatch {
                expected: self.window_len,
                actual: window.values.len(),
            });
        }
        if self.by_id.contains_key(&window.id) {
            return Err(Error::DuplicateWindow(window.id));
        }
        let idx = self.windows.len();
        self.by_id.insert(window.id.clone(), idx);
        self.windows.push(window);
        Ok(idx)
    }

    fn next_recluster_seed(&mut self) -> u64 {
        self.reclusters += 1;
        self.config
            .seed
            .wrapping_add(self.reclusters.wrapping_mul(0x9e37_79b9_7f4a_7c15))
    }

    fn make_cluster(&self, members: Vec<usize>) -> ClusterNode {
        let centroid = mean_of(&self.windows, &members, self.window_len);
        let prototype = select_prototype(&centroid, &members, &self.windows);
        ClusterNode {
            centroid,
            prototype,
            members,
        }
    }

    /// Splits an oversize member set into clusters of at most `cap` members.
    fn split_members(&self, members: Vec<usize>, seed: u64) -> Result<Vec<ClusterNode>> {
        let cap = self.config.cap;
        if members.len() <= cap {
            return Ok(vec![self.make_cluster(members)]);
        }
        let m = members.len().div_ceil(cap);
        let first = &self.windows[members[0]].values;
        if members.iter().all(|&i| &self.windows[i].values == first) {
            // k-means cannot separate identical points; chunk them by id
            let mut sorted = members;
            sorted.sort_by(|&a, &b| self.windows[a].id.cmp(&self.windows[b].id));
            let base = sorted.len() / m;
            let extra = sorted.len() % m;
            let mut out = Vec::with_capacity(m);
            let mut rest = sorted.as_slice();
            for k in 0..m {
                let (chunk, tail) = rest.split_at(base + usize::from(k < extra));
                out.push(self.make_cluster(chunk.to_vec()));
                rest = tail;
            }
            return Ok(out);
        }

        let points: Vec<&[f64]> = members.iter().map(|&i| self.windows[i].values.as_slice()).collect();
        let result = kmeans::kmeans(
            &points,
            m,
            KMeansConfig {
                max_iters: self.config.max_iters,
                tol: self.config.tol,
                seed,
            },
        )?;
        let mut groups = vec![Vec::new(); m];
        for (&idx, &a) in members.iter().zip(&result.assignments) {
            groups[a].push(idx);
        }
        let mut out = Vec::with_capacity(m);
        for (k, g) in groups.into_iter().enumerate() {
            if g.is_empty() {
                continue;
            }
            out.extend(self.split_members(g, seed.wrapping_add(k as u64 + 1))?);
        }
        Ok(out)
    }

    /// Adds a window to the cluster whose prototype is nearest within the
    /// window's domain, creating the domain if needed. Splits the cluster with
    /// [`Self::local_recluster`] when it exceeds the cap.
    pub fn insert(&mut self, window: SeriesWindow) -> Result<InsertOutcome> {
        let idx = self.push_window(window)?;
        let domain = self.windows[idx].domain.clone();
        let Some(node) = self.domains.get(&domain) else {
            let cluster = self.make_cluster(vec![idx]);
            self.domains.insert(
                domain,
                DomainNode {
                    clusters: vec![cluster],
                },
            );
            return Ok(InsertOutcome {
                index: idx,
                domain_created: true,
                split_into: 1,
            });
        };

        let values = &self.windows[idx].values;
        let mut target = 0;
        let mut best = f64::INFINITY;
        for (ci, c) in node.clusters.iter().enumerate() {
            let d = sq_dist(values, &self.windows[c.prototype].values);
            if d < best {
                best = d;
                target = ci;
            }
        }

        let node = self.domains.get_mut(&domain).expect("domain exists");
        let cluster = &mut node.clusters[target];
        cluster.members.push(idx);
        let n = cluster.members.len() as f64;
        for (c, v) in cluster.centroid.iter_mut().zip(&self.windows[idx].values) {
            *c += (v - *c) / n;
        }
        cluster.prototype = select_prototype(&cluster.centroid, &cluster.members, &self.windows);

        let split_into = if cluster.members.len() > self.config.cap {
            self.local_recluster(&domain, target)?
        } else {
            1
        };
        Ok(InsertOutcome {
            index: idx,
            domain_created: false,
            split_into,
        })
    }

    /// Re-partitions one oversize cluster into `ceil(size / cap)` k-means
    /// sub-clusters. The first replaces the original in place; the rest are
    /// appended. Sibling clusters are not touched. Returns the number of
    /// resulting clusters.
    pub fn local_recluster(&mut self, domain: &str, cluster: usize) -> Result<usize> {
        let size = self
            .domains
            .get(domain)
            .and_then(|n| n.clusters.get(cluster))
            .map(|c| c.members.len())
            .ok_or_else(|| Error::InvalidArgument(format!("no cluster {cluster} in domain {domain}")))?;
        if size <= self.config.cap {
            return Err(Error::InvalidArgument(format!(
                "cluster {cluster} in {domain} has {size} members, cap is {}",
                self.config.cap
            )));
        }
        let members = self.domains[domain].clusters[cluster].members.clone();
        let seed = self.next_recluster_seed();
        let mut parts = self.split_members(members, seed)?.into_iter();
        let count = parts.len();
        let node = self.domains.get_mut(domain).expect("checked above");
        node.clusters[cluster] = parts.next().expect("at least one part");
        node.clusters.extend(parts);
        Ok(count)
    }

    pub fn window_len(&self) -> usize {
        self.window_len
    }

    pub fn cap(&self) -> usize {
        self.config.cap
    }

    pub fn seed(&self) -> u64 {
        self.config.seed
    }

    pub fn config(&self) -> TreeConfig {
        self.config
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn windows(&self) -> &[SeriesWindow] {
        &self.windows
    }

    pub fn window(&self, idx: usize) -> &SeriesWindow {
        &self.windows[idx]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn domains(&self) -> &BTreeMap<String, DomainNode> {
        &self.domains
    }

    pub fn domain(&self, name: &str) -> Option<&DomainNode> {
        self.domains.get(name)
    }

    pub fn cluster_count(&self) -> usize {
        self.domains.values().map(|d| d.clusters.len()).sum()
    }

    /// All clusters in domain order, tagged with their domain name.
    pub fn clusters(&self) -> impl Iterator<Item = (&str, &ClusterNode)> {
        self.domains
            .iter()
            .flat_map(|(name, node)| node.clusters.iter().map(move |c| (name.as_str(), c)))
    }

    /// Per-domain cluster sizes.
    pub fn summary(&self) -> Vec<(String, Vec<usize>)> {
        self.domains
            .iter()
            .map(|(name, node)| {
                (
                    name.clone(),
                    node.clusters.iter().map(|c| c.members.len()).collect(),
                )
            })
            .collect()
    }

    /// Brute-force check of the structural invariants: cap respected, every
    /// window in exactly one cluster of its own domain, prototypes are members
    /// and minimize distance to the centroid.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let mut seen = vec![0u32; self.windows.len()];
        for (domain, node) in &self.domains {
            if node.clusters.is_empty() {
                return Err(format!("domain {domain} has no clusters"));
            }
            for (ci, c) in node.clusters.iter().enumerate() {
                if c.members.is_empty() || c.members.len() > self.config.cap {
                    return Err(format!(
                        "{domain}/{ci}: size {} outside [1, {}]",
                        c.members.len(),
                        self.config.cap
                    ));
                }
                if !c.members.contains(&c.prototype) {
                    return Err(format!("{domain}/{ci}: prototype is not a member"));
                }
                let pd = sq_dist(&self.windows[c.prototype].values, &c.centroid);
                for &m in &c.members {
                    let w = self.windows.get(m).ok_or_else(|| format!("dangling member {m}"))?;
                    if &w.domain != domain {
                        return Err(format!("{} filed under {domain}", w.id));
                    }
                    seen[m] += 1;
                    let d = sq_dist(&w.values, &c.centroid);
                    if d < pd || (d == pd && w.id < self.windows[c.prototype].id) {
                        return Err(format!("{domain}/{ci}: {} beats the prototype", w.id));
                    }
                }
            }
        }
        if let Some(i) = seen.iter().position(|&n| n != 1) {
            return Err(format!("{} indexed {} times", self.windows[i].id, seen[i]));
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        let io = |e: std::io::Error| Error::TreeFormat(e.to_string());
        out.write_all(MAGIC).map_err(io)?;
        out.write_u32::<LittleEndian>(FORMAT_VERSION).map_err(io)?;
        out.write_u64::<LittleEndian>(self.window_len as u64).map_err(io)?;
        out.write_u64::<LittleEndian>(self.config.cap as u64).map_err(io)?;
        out.write_u64::<LittleEndian>(self.config.seed).map_err(io)?;
        out.write_u64::<LittleEndian>(self.config.max_iters as u64).map_err(io)?;
        out.write_f64::<LittleEndian>(self.config.tol).map_err(io)?;
        out.write_u64::<LittleEndian>(self.reclusters).map_err(io)?;

        out.write_u64::<LittleEndian>(self.windows.len() as u64).map_err(io)?;
        for w in &self.windows {
            write_str(&mut out, &w.parent_id).map_err(io)?;
            out.write_u64::<LittleEndian>(w.channel as u64).map_err(io)?;
            out.write_u64::<LittleEndian>(w.offset as u64).map_err(io)?;
            write_str(&mut out, &w.domain).map_err(io)?;
            write_str(&mut out, &w.id).map_err(io)?;
            for &v in &w.values {
                out.write_f64::<LittleEndian>(v).map_err(io)?;
            }
        }

        out.write_u64::<LittleEndian>(self.domains.len() as u64).map_err(io)?;
        for (name, node) in &self.domains {
            write_str(&mut out, name).map_err(io)?;
            out.write_u64::<LittleEndian>(node.clusters.len() as u64).map_err(io)?;
            for c in &node.clusters {
                for &v in &c.centroid {
                    out.write_f64::<LittleEndian>(v).map_err(io)?;
                }
                out.write_u64::<LittleEndian>(c.prototype as u64).map_err(io)?;
                out.write_u64::<LittleEndian>(c.members.len() as u64).map_err(io)?;
                for &m in &c.members {
                    out.write_u64::<LittleEndian>(m as u64).map_err(io)?;
                }
            }
        }
        out.flush().map_err(io)
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let io = |e: std::io::Error| Error::TreeFormat(e.to_string());
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(Error::TreeFormat("not a tree file".into()));
        }
        let version = input.read_u32::<LittleEndian>().map_err(io)?;
        if version != FORMAT_VERSION {
            return Err(Error::TreeFormat(format!("unsupported version {version}")));
        }
        let window_len = read_usize(&mut input)?;
        let config = TreeConfig {
            cap: read_usize(&mut input)?,
            seed: input.read_u64::<LittleEndian>().map_err(io)?,
            max_iters: read_usize(&mut input)?,
            tol: input.read_f64::<LittleEndian>().map_err(io)?,
        };
        let mut tree = Self::empty(window_len, config)?;
        tree.reclusters = input.read_u64::<LittleEndian>().map_err(io)?;

        let n = read_usize(&mut input)?;
        for _ in 0..n {
            let parent_id = read_str(&mut input)?;
            let channel = read_usize(&mut input)?;
            let offset = read_usize(&mut input)?;
            let domain = read_str(&mut input)?;
            let id = read_str(&mut input)?;
            let values = (0..window_len)
                .map(|_| input.read_f64::<LittleEndian>().map_err(io))
                .collect::<Result<Vec<_>>>()?;
            tree.push_window(SeriesWindow {
                id,
                parent_id,
                channel,
                offset,
                domain,
                values,
            })?;
        }

        let nd = read_usize(&mut input)?;
        for _ in 0..nd {
            let name = read_str(&mut input)?;
            let nc = read_usize(&mut input)?;
            let mut node = DomainNode::default();
            for _ in 0..nc {
                let centroid = (0..window_len)
                    .map(|_| input.read_f64::<LittleEndian>().map_err(io))
                    .collect::<Result<Vec<_>>>()?;
                let prototype = read_usize(&mut input)?;
                let nm = read_usize(&mut input)?;
                let members = (0..nm).map(|_| read_usize(&mut input)).collect::<Result<Vec<_>>>()?;
                if prototype >= n || members.iter().any(|&m| m >= n) {
                    return Err(Error::TreeFormat("member index out of range".into()));
                }
                node.clusters.push(ClusterNode {
                    centroid,
                    prototype,
                    members,
                });
            }
            tree.domains.insert(name, node);
        }
        Ok(tree)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        buf
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(BufWriter::new(file))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(file))
    }
}

/// Builds a tree with default k-means settings.
pub fn build_tree(windows: Vec<SeriesWindow>, cap: usize, seed: u64) -> Result<SeriesTree> {
    SeriesTree::build(
        windows,
        TreeConfig {
            cap,
            seed,
            ..TreeConfig::default()
        },
    )
}

fn write_str<W: Write>(out: &mut W, s: &str) -> std::io::Result<()> {
    out.write_u32::<LittleEndian>(s.len() as u32)?;
    out.write_all(s.as_bytes())
}

fn read_usize<R: Read>(input: &mut R) -> Result<usize> {
    let v = input
        .read_u64::<LittleEndian>()
        .map_err(|e| Error::TreeFormat(e.to_string()))?;
    usize::try_from(v).map_err(|_| Error::TreeFormat("length overflow".into()))
}

fn read_str<R: Read>(input: &mut R) -> Result<String> {
    let len = input
        .read_u32::<LittleEndian>()
        .map_err(|e| Error::TreeFormat(e.to_string()))? as usize;
    let mut buf = vec![0u8; len];
    input
        .read_exact(&mut buf)
        .map_err(|e| Error::TreeFormat(e.to_string()))?;
    String::from_utf8(buf).map_err(|_| Error::TreeFormat("invalid utf-8".into()))
}
