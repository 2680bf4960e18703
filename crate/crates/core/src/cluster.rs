//! HDBSCAN over audio embeddings.
//!
//! The pipeline is the standard one: core distances, mutual-reachability
//! distances `max(core(a), core(b), d(a, b))`, a minimum spanning tree over
//! them (Prim), the single-linkage hierarchy from the sorted MST, condensation
//! with `min_cluster_size`, and excess-of-mass selection. Distances are exact
//! (no approximate neighbour index). Wherever two candidates tie, the lower
//! row index wins, so output depends only on the input.

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Campaign, CampaignMember, Feed};
use crate::points::Points;

/// Distances below this are treated as this when converting to lambda = 1/d,
/// so exact duplicates get a large finite density instead of infinity.
pub const MIN_LAMBDA_DISTANCE: f64 = 1e-12;

/// Above this many rows the pairwise distance matrix is not cached.
const DENSE_CACHE_MAX_ROWS: usize = 2500;

#[derive(Debug, Error, PartialEq)]
pub enum ClusterError {
    #[error("row {0} has zero norm; cosine distance is undefined")]
    ZeroNorm(usize),
    #[error("vectors have different dimensions ({0} vs {1})")]
    DimensionMismatch(usize, usize),
    #[error("need more than {k} rows for k-nearest-neighbour core distances, got {count}")]
    TooFewPoints { count: usize, k: usize },
    #[error("invalid cluster parameters: {0}")]
    InvalidParams(String),
    #[error("{labels} labels for {rows} rows")]
    Misaligned { labels: usize, rows: usize },
    #[error("label {0} outside the assignment's label domain")]
    InvalidLabel(i64),
    #[error("cluster {label} has {size} members, below min_cluster_size {min}")]
    UndersizedCluster { label: i64, size: usize, min: usize },
    #[error("call `{0}` is not in the feed")]
    UnknownCall(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Cosine,
    Euclidean,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Cosine => "cosine",
            Metric::Euclidean => "euclidean",
        })
    }
}

impl FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "cosine" => Ok(Metric::Cosine),
            "euclidean" => Ok(Metric::Euclidean),
            other => Err(format!(
                "unknown metric `{other}` (expected cosine|euclidean)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterParams {
    pub min_cluster_size: usize,
    pub min_samples: usize,
    pub metric: Metric,
    /// Rows whose GLOSH outlier score exceeds this are labelled -1 even when
    /// they fall out of a selected cluster. `1.0` keeps every such row.
    #[serde(default = "default_max_outlier_score")]
    pub max_outlier_score: f64,
}

fn default_max_outlier_score() -> f64 {
    0.9
}

impl Default for ClusterParams {
    fn default() -> Self {
        ClusterParams {
            min_cluster_size: 5,
            min_samples: 5,
            metric: Metric::Cosine,
            max_outlier_score: default_max_outlier_score(),
        }
    }
}

impl ClusterParams {
    pub fn validate(&self) -> Result<(), ClusterError> {
        if self.min_cluster_size < 2 {
            return Err(ClusterError::InvalidParams(
                "min_cluster_size must be at least 2".into(),
            ));
        }
        if self.min_samples < 1 {
            return Err(ClusterError::InvalidParams(
                "min_samples must be at least 1".into(),
            ));
        }
        if !(self.max_outlier_score > 0.0 && self.max_outlier_score <= 1.0) {
            return Err(ClusterError::InvalidParams(
                "max_outlier_score must lie in (0, 1]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    /// Per row: -1 for outliers, otherwise a cluster index in `[0, n_clusters)`.
    pub labels: Vec<i64>,
    pub n_clusters: usize,
    /// Excess-of-mass stability per cluster, indexed by label.
    pub stabilities: Vec<f64>,
    pub min_cluster_size: usize,
    /// GLOSH score per row in `[0, 1]`; higher is more outlying.
    pub outlier_scores: Vec<f64>,
}

impl ClusterAssignment {
    pub fn n_outliers(&self) -> usize {
        self.labels.iter().filter(|&&l| l < 0).count()
    }

    /// Member row indices for each cluster label.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_clusters];
        for (i, &l) in self.labels.iter().enumerate() {
            if l >= 0 {
                out[l as usize].push(i);
            }
        }
        out
    }
}

fn dot(u: &[f32], v: &[f32]) -> f64 {
    u.iter().zip(v).map(|(&a, &b)| a as f64 * b as f64).sum()
}

fn norm(u: &[f32]) -> f64 {
    dot(u, u).sqrt()
}

fn cosine_from_parts(dot: f64, norm_u: f64, norm_v: f64) -> f64 {
    (1.0 - dot / (norm_u * norm_v)).clamp(0.0, 2.0)
}

/// `1 - u·v / (|u| |v|)`, clamped to `[0, 2]` against rounding.
pub fn cosine_distance(u: &[f32], v: &[f32]) -> Result<f64, ClusterError> {
    if u.len() != v.len() {
        return Err(ClusterError::DimensionMismatch(u.len(), v.len()));
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 {
        return Err(ClusterError::ZeroNorm(0));
    }
    if nv == 0.0 {
        return Err(ClusterError::ZeroNorm(1));
    }
    Ok(cosine_from_parts(dot(u, v), nu, nv))
}

pub fn euclidean_distance(u: &[f32], v: &[f32]) -> f64 {
    u.iter()
        .zip(v)
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Pairwise distances over a point set, with per-row norms precomputed for cosine.
/// Every pair goes through the same arithmetic as [`cosine_distance`] /
/// [`euclidean_distance`], so results are bit-identical to the public functions.
pub(crate) struct DistanceOracle<'a> {
    points: Points<'a>,
    metric: Metric,
    norms: Vec<f64>,
}

impl<'a> DistanceOracle<'a> {
    pub(crate) fn new(points: Points<'a>, metric: Metric) -> Result<Self, ClusterError> {
        let norms = match metric {
            Metric::Cosine => {
                let norms: Vec<f64> = points.rows().map(norm).collect();
                if let Some(i) = norms.iter().position(|&n| n == 0.0) {
                    return Err(ClusterError::ZeroNorm(i));
                }
                norms
            }
            Metric::Euclidean => Vec::new(),
        };
        Ok(DistanceOracle {
            points,
            metric,
            norms,
        })
    }

    pub(crate) fn len(&self) -> usize {
        self.points.len()
    }

    pub(crate) fn distance(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return 0.0;
        }
        let (u, v) = (self.points.row(i), self.points.row(j));
        match self.metric {
            Metric::Cosine => cosine_from_parts(dot(u, v), self.norms[i], self.norms[j]),
            Metric::Euclidean => euclidean_distance(u, v),
        }
    }
}

/// Either a cached upper-triangular distance matrix or on-the-fly evaluation.
enum Distances<'a> {
    Dense { n: usize, packed: Vec<f64> },
    Lazy(DistanceOracle<'a>),
}

impl<'a> Distances<'a> {
    fn build(oracle: DistanceOracle<'a>, allow_dense: bool) -> Self {
        let n = oracle.len();
        if !allow_dense || n > DENSE_CACHE_MAX_ROWS {
            return Distances::Lazy(oracle);
        }
        // row i stores d(i, j) for j > i
        let rows: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| ((i + 1)..n).map(|j| oracle.distance(i, j)).collect())
            .collect();
        Distances::Dense {
            n,
            packed: rows.into_iter().flatten().collect(),
        }
    }

    fn len(&self) -> usize {
        match self {
            Distances::Dense { n, .. } => *n,
            Distances::Lazy(o) => o.len(),
        }
    }

    fn get(&self, i: usize, j: usize) -> f64 {
        match self {
            Distances::Dense { n, packed } => {
                if i == j {
                    return 0.0;
                }
                let (a, b) = if i < j { (i, j) } else { (j, i) };
                // offset of row a in the packed upper triangle
                let offset = a * (2 * n - a - 1) / 2;
                packed[offset + (b - a - 1)]
            }
            Distances::Lazy(o) => o.distance(i, j),
        }
    }

    fn core_distances(&self, k: usize) -> Vec<f64> {
        let n = self.len();
        (0..n)
            .into_par_iter()
            .map(|i| {
                let mut row: Vec<f64> =
                    (0..n).filter(|&j| j != i).map(|j| self.get(i, j)).collect();
                let (_, kth, _) = row.select_nth_unstable_by(k - 1, f64::total_cmp);
                *kth
            })
            .collect()
    }
}

/// Distance from each row to its k-th nearest other row.
pub fn core_distances(
    points: Points<'_>,
    k: usize,
    metric: Metric,
) -> Result<Vec<f64>, ClusterError> {
    if k == 0 || points.len() <= k {
        return Err(ClusterError::TooFewPoints {
            count: points.len(),
            k,
        });
    }
    let oracle = DistanceOracle::new(points, metric)?;
    Ok(Distances::build(oracle, true).core_distances(k))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MstEdge {
    pub from: usize,
    pub to: usize,
    pub weight: f64,
}

/// Prim's algorithm over the implicit complete graph of mutual-reachability
/// distances. Edges come out in insertion order.
fn prim_mst(dist: &Distances<'_>, core: &[f64]) -> Vec<MstEdge> {
    let n = dist.len();
    if n < 2 {
        return Vec::new();
    }
    let mut in_tree = vec![false; n];
    let mut best = vec![f64::INFINITY; n];
    let mut best_from = vec![0usize; n];
    let mut edges = Vec::with_capacity(n - 1);
    let mut current = 0usize;
    in_tree[0] = true;

    for _ in 1..n {
        let candidates: Vec<(usize, f64)> = (0..n)
            .into_par_iter()
            .filter(|&j| !in_tree[j])
            .map(|j| {
                let mr = dist.get(current, j).max(core[current]).max(core[j]);
                (j, mr)
            })
            .collect();
        let mut next = usize::MAX;
        let mut next_w = f64::INFINITY;
        for (j, mr) in candidates {
            if mr < best[j] {
                best[j] = mr;
                best_from[j] = current;
            }
            // strict < keeps the lowest index among ties (ascending scan)
            if next == usize::MAX || best[j] < next_w {
                next = j;
                next_w = best[j];
            }
        }
        edges.push(MstEdge {
            from: best_from[next],
            to: next,
            weight: next_w,
        });
        in_tree[next] = true;
        current = next;
    }
    edges
}

/// Minimum spanning tree of the mutual-reachability graph.
pub fn mutual_reachability_mst(
    points: Points<'_>,
    min_samples: usize,
    metric: Metric,
) -> Result<Vec<MstEdge>, ClusterError> {
    let oracle = DistanceOracle::new(points, metric)?;
    let n = oracle.len();
    if n < 2 {
        return Ok(Vec::new());
    }
    let k = min_samples.min(n - 1).max(1);
    let dist = Distances::build(oracle, true);
    let core = dist.core_distances(k);
    Ok(prim_mst(&dist, &core))
}

/// A merge in the single-linkage hierarchy. All MST edges of one weight are
/// applied together, so a node may join more than two components; this keeps
/// the hierarchy independent of how tied edges happen to be ordered.
#[derive(Debug, Clone)]
struct LinkageNode {
    children: Vec<usize>,
    distance: f64,
    size: usize,
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        let mut root = x;
        while self.parent[root] != root {
            root = self.parent[root];
        }
        while self.parent[x] != root {
            let up = self.parent[x];
            self.parent[x] = root;
            x = up;
        }
        root
    }
}

/// Single-linkage hierarchy over `n` points; node `n + i` is the i-th merge
/// and the last node is the root.
fn single_linkage(n: usize, mst: &[MstEdge]) -> Vec<LinkageNode> {
    let mut sorted = mst.to_vec();
    sorted.sort_by(|a, b| a.weight.total_cmp(&b.weight));

    // component membership of points, and the hierarchy node each component maps to
    let mut points = UnionFind::new(n);
    let mut node_of: Vec<usize> = (0..n).collect();
    let mut sizes: Vec<usize> = vec![1; n];
    let mut nodes: Vec<LinkageNode> = Vec::new();

    let mut start = 0;
    while start < sorted.len() {
        let weight = sorted[start].weight;
        let mut end = start;
        while end < sorted.len() && sorted[end].weight == weight {
            end += 1;
        }
        // group the components touched at this level
        let mut local: HashMap<usize, usize> = HashMap::new();
        let mut reps: Vec<usize> = Vec::new();
        let mut local_parent: Vec<usize> = Vec::new();
        let mut slot = |root: usize, reps: &mut Vec<usize>, lp: &mut Vec<usize>| -> usize {
            *local.entry(root).or_insert_with(|| {
                reps.push(root);
                lp.push(lp.len());
                lp.len() - 1
            })
        };
        let mut pairs = Vec::with_capacity(end - start);
        for e in &sorted[start..end] {
            let (ra, rb) = (points.find(e.from), points.find(e.to));
            let a = slot(ra, &mut reps, &mut local_parent);
            let b = slot(rb, &mut reps, &mut local_parent);
            pairs.push((a, b));
        }
        fn local_find(lp: &mut [usize], mut x: usize) -> usize {
            while lp[x] != x {
                lp[x] = lp[lp[x]];
                x = lp[x];
            }
            x
        }
        for (a, b) in pairs {
            let (ra, rb) = (
                local_find(&mut local_parent, a),
                local_find(&mut local_parent, b),
            );
            if ra != rb {
                let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
                local_parent[hi] = lo;
            }
        }
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); reps.len()];
        for i in 0..reps.len() {
            let g = local_find(&mut local_parent, i);
            groups[g].push(reps[i]);
        }
        for group in groups.into_iter().filter(|g| g.len() > 1) {
            let id = n + nodes.len();
            let keep = group[0];
            let mut children = Vec::with_capacity(group.len());
            let mut size = 0;
            for &root in &group {
                children.push(node_of[root]);
                size += sizes[root];
                points.parent[root] = keep;
            }
            points.parent[keep] = keep;
            node_of[keep] = id;
            sizes[keep] = size;
            nodes.push(LinkageNode {
                children,
                distance: weight,
                size,
            });
        }
        start = end;
    }
    nodes
}

#[derive(Debug, Clone, Copy)]
struct CondensedEntry {
    parent: usize,
    /// Point index, or a cluster id when `child_is_cluster`.
    child: usize,
    child_is_cluster: bool,
    lambda: f64,
    size: usize,
}

fn lambda_of(distance: f64) -> f64 {
    1.0 / distance.max(MIN_LAMBDA_DISTANCE)
}

/// Condensed cluster tree. Cluster 0 is the root; ids increase top-down.
fn condense(
    n: usize,
    linkage: &[LinkageNode],
    min_cluster_size: usize,
) -> (Vec<CondensedEntry>, usize) {
    let root = n + linkage.len() - 1;
    let node_size = |id: usize| if id < n { 1 } else { linkage[id - n].size };
    let mut relabel = vec![usize::MAX; n + linkage.len()];
    relabel[root] = 0;
    let mut next_cluster = 1;
    let mut entries = Vec::new();
    let mut queue = VecDeque::from([root]);

    let leaves = |node: usize| -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![node];
        while let Some(x) = stack.pop() {
            if x < n {
                out.push(x);
            } else {
                stack.extend(linkage[x - n].children.iter().rev());
            }
        }
        out
    };

    while let Some(node) = queue.pop_front() {
        if node < n {
            continue;
        }
        let link = &linkage[node - n];
        let parent = relabel[node];
        let lambda = lambda_of(link.distance);
        let n_big = link
            .children
            .iter()
            .filter(|&&c| node_size(c) >= min_cluster_size)
            .count();

        for &child in &link.children {
            let size = node_size(child);
            if size >= min_cluster_size && n_big >= 2 {
                relabel[child] = next_cluster;
                entries.push(CondensedEntry {
                    parent,
                    child: next_cluster,
                    child_is_cluster: true,
                    lambda,
                    size,
                });
                next_cluster += 1;
                queue.push_back(child);
            } else if size >= min_cluster_size {
                // the only large side continues as the same cluster
                relabel[child] = parent;
                queue.push_back(child);
            } else {
                for p in leaves(child) {
                    entries.push(CondensedEntry {
                        parent,
                        child: p,
                        child_is_cluster: false,
                        lambda,
                        size: 1,
                    });
                }
            }
        }
    }
    (entries, next_cluster)
}

struct Selection {
    selected: Vec<bool>,
    stability: Vec<f64>,
    cluster_parent: Vec<usize>,
}

fn select_excess_of_mass(entries: &[CondensedEntry], n_clusters: usize) -> Selection {
    let mut birth = vec![0.0f64; n_clusters];
    let mut cluster_parent = vec![0usize; n_clusters];
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); n_clusters];
    for e in entries.iter().filter(|e| e.child_is_cluster) {
        birth[e.child] = e.lambda;
        cluster_parent[e.child] = e.parent;
        children[e.parent].push(e.child);
    }
    let mut stability = vec![0.0f64; n_clusters];
    for e in entries {
        stability[e.parent] += (e.lambda - birth[e.parent]) * e.size as f64;
    }

    let own_stability = stability.clone();
    let mut selected = vec![true; n_clusters];
    selected[0] = false;
    // children always carry larger ids than their parent
    for c in (1..n_clusters).rev() {
        let subtree: f64 = children[c].iter().map(|&ch| stability[ch]).sum();
        if subtree > stability[c] {
            selected[c] = false;
            stability[c] = subtree;
        } else {
            let mut stack = children[c].clone();
            while let Some(d) = stack.pop() {
                selected[d] = false;
                stack.extend_from_slice(&children[d]);
            }
        }
    }
    Selection {
        selected,
        stability: own_stability,
        cluster_parent,
    }
}

fn all_outliers(n: usize, min_cluster_size: usize) -> ClusterAssignment {
    ClusterAssignment {
        labels: vec![-1; n],
        n_clusters: 0,
        stabilities: Vec::new(),
        min_cluster_size,
        outlier_scores: vec![0.0; n],
    }
}

/// `(lambda_max(C) - lambda_p) / lambda_max(C)` where `C` is the cluster the
/// point falls out of and `lambda_max(C)` ranges over its whole subtree.
fn glosh_scores(
    n: usize,
    entries: &[CondensedEntry],
    cluster_parent: &[usize],
    n_clusters: usize,
) -> Vec<f64> {
    let mut lambda_max = vec![0.0f64; n_clusters];
    for e in entries.iter().filter(|e| !e.child_is_cluster) {
        lambda_max[e.parent] = lambda_max[e.parent].max(e.lambda);
    }
    // children always carry larger ids than their parent
    for c in (1..n_clusters).rev() {
        let p = cluster_parent[c];
        lambda_max[p] = lambda_max[p].max(lambda_max[c]);
    }
    let mut scores = vec![0.0f64; n];
    for e in entries.iter().filter(|e| !e.child_is_cluster) {
        let top = lambda_max[e.parent];
        if top > 0.0 {
            scores[e.child] = ((top - e.lambda) / top).clamp(0.0, 1.0);
        }
    }
    scores
}

/// Clusters the rows of `points`. Fewer rows than `min_cluster_size` yields
/// an all-outlier assignment. The effective neighbour count for core
/// distances is `min(min_samples, count - 1)`.
pub fn hdbscan(
    points: Points<'_>,
    params: &ClusterParams,
) -> Result<ClusterAssignment, ClusterError> {
    params.validate()?;
    let n = points.len();
    if n < params.min_cluster_size || n < 2 {
        return Ok(all_outliers(n, params.min_cluster_size));
    }
    let oracle = DistanceOracle::new(points, params.metric)?;
    let dist = Distances::build(oracle, true);
    let k = params.min_samples.min(n - 1);
    let core = dist.core_distances(k);
    let mst = prim_mst(&dist, &core);
    drop(dist);

    let linkage = single_linkage(n, &mst);
    let (entries, n_tree_clusters) = condense(n, &linkage, params.min_cluster_size);
    let sel = select_excess_of_mass(&entries, n_tree_clusters);
    let outlier_scores = glosh_scores(n, &entries, &sel.cluster_parent, n_tree_clusters);

    // resolve each point to its nearest selected ancestor cluster
    let mut point_cluster = vec![usize::MAX; n];
    for e in entries.iter().filter(|e| !e.child_is_cluster) {
        if outlier_scores[e.child] > params.max_outlier_score {
            continue;
        }
        let mut c = e.parent;
        while c != 0 && !sel.selected[c] {
            c = sel.cluster_parent[c];
        }
        if c != 0 {
            point_cluster[e.child] = c;
        }
    }

    // a cluster thinned below min_cluster_size by the score cutoff dissolves
    let mut sizes: HashMap<usize, usize> = HashMap::new();
    for &c in point_cluster.iter().filter(|&&c| c != usize::MAX) {
        *sizes.entry(c).or_default() += 1;
    }
    for c in point_cluster.iter_mut() {
        if *c != usize::MAX && sizes[c] < params.min_cluster_size {
            *c = usize::MAX;
        }
    }

    // canonical labels: ordered by each cluster's lowest member row
    let mut label_of: HashMap<usize, i64> = HashMap::new();
    let mut stabilities = Vec::new();
    let mut labels = vec![-1i64; n];
    for (i, &c) in point_cluster.iter().enumerate() {
        if c == usize::MAX {
            continue;
        }
        let next = label_of.len() as i64;
        let label = *label_of.entry(c).or_insert_with(|| {
            stabilities.push(sel.stability[c]);
            next
        });
        labels[i] = label;
    }
    Ok(ClusterAssignment {
        labels,
        n_clusters: label_of.len(),
        stabilities,
        min_cluster_size: params.min_cluster_size,
        outlier_scores,
    })
}

/// Output of [`campaigns_from_labels`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CampaignSet {
    pub campaigns: Vec<Campaign>,
    pub outliers: Vec<String>,
}

pub fn campaign_id(feed_id: &str, label: usize) -> String {
    format!("{feed_id}-c{label:05}")
}

/// Groups clustered rows into campaigns. `row_call_ids[i]` names the call
/// behind `assignment.labels[i]`.
pub fn campaigns_from_labels(
    feed: &Feed,
    row_call_ids: &[String],
    assignment: &ClusterAssignment,
) -> Result<CampaignSet, ClusterError> {
    if row_call_ids.len() != assignment.labels.len() {
        return Err(ClusterError::Misaligned {
            labels: assignment.labels.len(),
            rows: row_call_ids.len(),
        });
    }
    let index = feed.record_index();
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); assignment.n_clusters];
    let mut outliers = Vec::new();
    for (row, (&label, call_id)) in assignment.labels.iter().zip(row_call_ids).enumerate() {
        if !index.contains_key(call_id.as_str()) {
            return Err(ClusterError::UnknownCall(call_id.clone()));
        }
        match label {
            -1 => outliers.push(call_id.clone()),
            l if l >= 0 && (l as usize) < assignment.n_clusters => groups[l as usize].push(row),
            l => return Err(ClusterError::InvalidLabel(l)),
        }
    }
    let mut campaigns = Vec::with_capacity(groups.len());
    for (label, rows) in groups.iter().enumerate() {
        if rows.len() < assignment.min_cluster_size {
            return Err(ClusterError::UndersizedCluster {
                label: label as i64,
                size: rows.len(),
                min: assignment.min_cluster_size,
            });
        }
        let records: Vec<_> = rows
            .iter()
            .map(|&r| &feed.records[index[row_call_ids[r].as_str()]])
            .collect();
        let members = records
            .iter()
            .map(|r| CampaignMember {
                call_id: r.call_id.clone(),
                transcript: r.transcript.clone(),
                first_attempt: r.first_attempt(),
            })
            .collect();
        campaigns.push(Campaign {
            campaign_id: campaign_id(&feed.feed_id, label),
            feed_id: feed.feed_id.clone(),
            members,
            representative_transcripts: Vec::new(),
            first_seen: records
                .iter()
                .map(|r| r.first_attempt())
                .min()
                .expect("non-empty"),
            last_seen: records
                .iter()
                .map(|r| r.last_attempt())
                .max()
                .expect("non-empty"),
        });
    }
    Ok(CampaignSet {
        campaigns,
        outliers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AttestationLevel, CallRecord, SipAttempt, Timestamp};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn pts(data: &[f32], dim: usize) -> Points<'_> {
        Points::new(data, dim)
    }

    #[test]
    fn cosine_distance_examples() {
        assert_eq!(cosine_distance(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert_eq!(cosine_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(cosine_distance(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(), 2.0);
        assert_eq!(
            cosine_distance(&[0.0, 0.0], &[1.0, 0.0]),
            Err(ClusterError::ZeroNorm(0))
        );
        assert!(matches!(
            cosine_distance(&[1.0], &[1.0, 0.0]),
            Err(ClusterError::DimensionMismatch(1, 2))
        ));
    }

    #[test]
    fn core_distance_examples() {
        let same = [0.3f32, 0.4, 0.3, 0.4, 0.3, 0.4];
        assert_eq!(
            core_distances(pts(&same, 2), 1, Metric::Euclidean).unwrap(),
            vec![0.0; 3]
        );

        let line = [0.0f32, 1.0, 3.0];
        assert_eq!(
            core_distances(pts(&line, 1), 1, Metric::Euclidean).unwrap(),
            vec![1.0, 1.0, 2.0]
        );
        assert_eq!(
            core_distances(pts(&line, 1), 3, Metric::Euclidean),
            Err(ClusterError::TooFewPoints { count: 3, k: 3 })
        );
    }

    #[test]
    fn dense_and_lazy_distances_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f32> = (0..60 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
        for metric in [Metric::Cosine, Metric::Euclidean] {
            let dense = Distances::build(DistanceOracle::new(pts(&data, 8), metric).unwrap(), true);
            let lazy = Distances::build(DistanceOracle::new(pts(&data, 8), metric).unwrap(), false);
            for i in 0..60 {
                for j in 0..60 {
                    assert_eq!(dense.get(i, j).to_bits(), lazy.get(i, j).to_bits());
                }
            }
            assert_eq!(dense.core_distances(4), lazy.core_distances(4));
        }
    }

    fn unit_copies(n_per: usize, axes: &[usize], dim: usize) -> Vec<f32> {
        let mut data = Vec::new();
        for &axis in axes {
            for _ in 0..n_per {
                let mut v = vec![0.0f32; dim];
                v[axis] = 1.0;
                data.extend(v);
            }
        }
        data
    }

    #[test]
    fn two_duplicate_groups_form_two_clusters() {
        let data = unit_copies(5, &[0, 1], 2);
        let params = ClusterParams {
            min_cluster_size: 3,
            min_samples: 3,
            metric: Metric::Cosine,
            ..ClusterParams::default()
        };
        let a = hdbscan(pts(&data, 2), &params).unwrap();
        assert_eq!(a.n_clusters, 2);
        assert_eq!(a.n_outliers(), 0);
        assert_eq!(a.labels, vec![0, 0, 0, 0, 0, 1, 1, 1, 1, 1]);
        assert!(a.stabilities.iter().all(|s| *s > 0.0));
    }

    #[test]
    fn too_few_points_are_all_outliers() {
        let data = unit_copies(4, &[0], 3);
        let a = hdbscan(pts(&data, 3), &ClusterParams::default()).unwrap();
        assert_eq!(a.labels, vec![-1; 4]);
        assert_eq!(a.n_clusters, 0);

        let empty: [f32; 0] = [];
        let a = hdbscan(pts(&empty, 3), &ClusterParams::default()).unwrap();
        assert!(a.labels.is_empty());
    }

    #[test]
    fn invalid_params_are_rejected() {
        let data = unit_copies(6, &[0], 2);
        let bad = ClusterParams {
            min_cluster_size: 1,
            ..ClusterParams::default()
        };
        assert!(matches!(
            hdbscan(pts(&data, 2), &bad),
            Err(ClusterError::InvalidParams(_))
        ));
    }

    fn unit(v: Vec<f32>) -> Vec<f32> {
        let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    /// Two tight blobs around orthogonal unit centroids plus uniform scatter.
    fn blobs_with_scatter(seed: u64, dim: usize) -> (Vec<f32>, Vec<i64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0f32, 0.05).unwrap();
        let gauss = Normal::new(0.0f32, 1.0).unwrap();
        let mut data = Vec::new();
        let mut truth = Vec::new();
        for blob in 0..2 {
            for _ in 0..20 {
                let mut v: Vec<f32> = (0..dim).map(|_| noise.sample(&mut rng)).collect();
                v[blob] += 1.0;
                data.extend(unit(v));
                truth.push(blob as i64);
            }
        }
        for _ in 0..10 {
            data.extend(unit((0..dim).map(|_| gauss.sample(&mut rng)).collect()));
            truth.push(-1);
        }
        (data, truth)
    }

    #[test]
    fn blobs_are_recovered_and_scatter_is_noise() {
        let dim = 32;
        let (data, truth) = blobs_with_scatter(11, dim);
        let a = hdbscan(pts(&data, dim), &ClusterParams::default()).unwrap();
        assert_eq!(a.n_clusters, 2);
        for blob in 0..2i64 {
            let labels: std::collections::BTreeSet<_> = truth
                .iter()
                .zip(&a.labels)
                .filter(|(t, _)| **t == blob)
                .map(|(_, l)| *l)
                .collect();
            assert_eq!(labels.len(), 1, "blob {blob} split: {labels:?}");
            assert!(*labels.iter().next().unwrap() >= 0);
        }
        // no scatter point joins a blob's label set beyond the blob members
        let blob_labels: Vec<i64> = a.labels[..40].to_vec();
        assert!(blob_labels.iter().all(|&l| l >= 0));
        let scatter_noise = a.labels[40..].iter().filter(|&&l| l == -1).count();
        assert!(
            scatter_noise >= 8,
            "only {scatter_noise} of 10 scatter points are noise"
        );
    }

    /// Partition of row indices, independent of label names.
    fn partition(labels: &[i64]) -> Vec<Vec<usize>> {
        let mut groups: std::collections::BTreeMap<i64, Vec<usize>> = Default::default();
        for (i, &l) in labels.iter().enumerate() {
            groups.entry(l).or_default().push(i);
        }
        let noise = groups.remove(&-1).unwrap_or_default();
        let mut out: Vec<Vec<usize>> = groups.into_values().collect();
        out.sort();
        out.push(noise);
        out
    }

    #[test]
    fn labels_are_canonical_by_lowest_row() {
        let (data, _) = blobs_with_scatter(5, 16);
        let a = hdbscan(pts(&data, 16), &ClusterParams::default()).unwrap();
        let mut firsts = vec![usize::MAX; a.n_clusters];
        for (i, &l) in a.labels.iter().enumerate() {
            if l >= 0 && firsts[l as usize] == usize::MAX {
                firsts[l as usize] = i;
            }
        }
        assert!(firsts.windows(2).all(|w| w[0] < w[1]));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn permuting_rows_permutes_labels(seed in 0u64..1000, perm_seed in 0u64..1000) {
            let dim = 16;
            let (data, _) = blobs_with_scatter(seed, dim);
            let n = data.len() / dim;
            let mut order: Vec<usize> = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(perm_seed);
            for i in (1..n).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
            let permuted: Vec<f32> = order.iter().flat_map(|&i| data[i * dim..(i + 1) * dim].to_vec()).collect();
            let base = hdbscan(pts(&data, dim), &ClusterParams::default()).unwrap();
            let perm = hdbscan(pts(&permuted, dim), &ClusterParams::default()).unwrap();
            let mut mapped = vec![0i64; n];
            for (new_pos, &orig) in order.iter().enumerate() {
                mapped[orig] = perm.labels[new_pos];
            }
            prop_assert_eq!(partition(&base.labels), partition(&mapped));
        }

        #[test]
        fn cosine_clustering_ignores_positive_scale(seed in 0u64..1000, scale_exp in -6i32..6) {
            let dim = 16;
            let (data, _) = blobs_with_scatter(seed, dim);
            let factor = 2f32.powi(scale_exp);
            let scaled: Vec<f32> = data.iter().map(|x| x * factor).collect();
            let a = hdbscan(pts(&data, dim), &ClusterParams::default()).unwrap();
            let b = hdbscan(pts(&scaled, dim), &ClusterParams::default()).unwrap();
            prop_assert_eq!(a.labels, b.labels);
        }

        #[test]
        fn clusters_respect_min_size(seed in 0u64..1000, mcs in 2usize..8, ms in 1usize..8) {
            let dim = 8;
            let (data, _) = blobs_with_scatter(seed, dim);
            let params = ClusterParams {
                min_cluster_size: mcs,
                min_samples: ms,
                metric: Metric::Euclidean,
                ..ClusterParams::default()
            };
            let a = hdbscan(pts(&data, dim), &params).unwrap();
            let members = a.members();
            prop_assert_eq!(members.len(), a.n_clusters);
            prop_assert_eq!(a.stabilities.len(), a.n_clusters);
            for m in &members {
                prop_assert!(m.len() >= mcs);
            }
            prop_assert!(a.labels.iter().all(|&l| l >= -1 && l < a.n_clusters as i64));
        }
    }

    fn feed_with(n: usize) -> Feed {
        let records = (0..n)
            .map(|i| CallRecord {
                call_id: format!("c{i}"),
                feed_id: "obs".into(),
                caller_id_raw: String::new(),
                called_number_raw: String::new(),
                attempts: vec![SipAttempt::at(Timestamp::from_millis(
                    1_000 * (10 - i as i64),
                ))],
                attestation: AttestationLevel::A,
                answered: true,
                total_duration_s: 30.0,
                voiced_duration_s: Some(20.0),
                transcript: Some(format!("transcript {i}")),
                language: None,
                embedding_row: Some(i),
            })
            .collect();
        Feed::from_records("obs", records).unwrap()
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn single_campaign_spans_member_times() {
        let feed = feed_with(5);
        let a = ClusterAssignment {
            labels: vec![0; 5],
            n_clusters: 1,
            stabilities: vec![1.0],
            min_cluster_size: 5,
            outlier_scores: Vec::new(),
        };
        let set = campaigns_from_labels(&feed, &ids(5), &a).unwrap();
        assert_eq!(set.campaigns.len(), 1);
        let c = &set.campaigns[0];
        assert_eq!(c.size(), 5);
        assert_eq!(c.campaign_id, "obs-c00000");
        assert_eq!(c.first_seen, Timestamp::from_millis(6_000));
        assert_eq!(c.last_seen, Timestamp::from_millis(10_000));
    }

    #[test]
    fn undersized_label_is_rejected() {
        let feed = feed_with(4);
        let a = ClusterAssignment {
            labels: vec![0, 0, 1, -1],
            n_clusters: 2,
            stabilities: vec![1.0, 1.0],
            min_cluster_size: 5,
            outlier_scores: Vec::new(),
        };
        assert!(matches!(
            campaigns_from_labels(&feed, &ids(4), &a),
            Err(ClusterError::UndersizedCluster { .. })
        ));
        let lenient = ClusterAssignment {
            min_cluster_size: 1,
            ..a
        };
        let set = campaigns_from_labels(&feed, &ids(4), &lenient).unwrap();
        let sizes: Vec<_> = set.campaigns.iter().map(Campaign::size).collect();
        assert_eq!(sizes, vec![2, 1]);
        assert_eq!(set.outliers, vec!["c3".to_string()]);
    }

    #[test]
    fn empty_and_misaligned_assignments() {
        let feed = feed_with(3);
        let empty = ClusterAssignment {
            labels: vec![],
            n_clusters: 0,
            stabilities: vec![],
            min_cluster_size: 5,
            outlier_scores: Vec::new(),
        };
        assert_eq!(
            campaigns_from_labels(&feed, &[], &empty).unwrap(),
            CampaignSet::default()
        );
        assert!(matches!(
            campaigns_from_labels(&feed, &ids(2), &empty),
            Err(ClusterError::Misaligned { labels: 0, rows: 2 })
        ));
    }
}
