//! Cluster quality: silhouette, Calinski-Harabasz, and the two ground-truth
//! scores used for manual campaign evaluation (cluster perfection and
//! intra-cluster precision). Outliers (label -1) never enter any score.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{ClusterError, DistanceOracle, Metric};
use crate::points::Points;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("need >=2 clusters, found {0}")]
    TooFewClusters(usize),
    #[error("{labels} labels for {rows} rows")]
    Misaligned { labels: usize, rows: usize },
    #[error("no clusters to score")]
    NoClusters,
    #[error("cluster {0} has no members")]
    EmptyCluster(usize),
    #[error("no ground-truth label for call `{0}`")]
    MissingTruth(String),
    #[error(transparent)]
    Distance(#[from] ClusterError),
}

/// Non-outlier rows with labels compacted to `0..k` (in order of first appearance
/// of each sorted label).
struct Clustered {
    rows: Vec<usize>,
    label: Vec<usize>,
    sizes: Vec<usize>,
}

fn clustered(labels: &[i64], n_rows: usize) -> Result<Clustered, EvalError> {
    if labels.len() != n_rows {
        return Err(EvalError::Misaligned {
            labels: labels.len(),
            rows: n_rows,
        });
    }
    let mut ids: Vec<i64> = labels.iter().copied().filter(|&l| l >= 0).collect();
    ids.sort_unstable();
    ids.dedup();
    let compact: HashMap<i64, usize> = ids.iter().enumerate().map(|(i, &l)| (l, i)).collect();
    let mut out = Clustered {
        rows: Vec::new(),
        label: Vec::new(),
        sizes: vec![0; ids.len()],
    };
    for (i, &l) in labels.iter().enumerate() {
        if let Some(&c) = compact.get(&l) {
            out.rows.push(i);
            out.label.push(c);
            out.sizes[c] += 1;
        }
    }
    Ok(out)
}

/// Mean silhouette over clustered points. Singleton clusters contribute 0.
pub fn silhouette_score(
    points: Points<'_>,
    labels: &[i64],
    metric: Metric,
) -> Result<f64, EvalError> {
    let c = clustered(labels, points.len())?;
    let k = c.sizes.len();
    if k < 2 {
        return Err(EvalError::TooFewClusters(k));
    }
    let dist = DistanceOracle::new(points, metric)?;
    let per_point: Vec<f64> = (0..c.rows.len())
        .into_par_iter()
        .map(|i| {
            let own = c.label[i];
            if c.sizes[own] == 1 {
                return 0.0;
            }
            let mut sums = vec![0.0f64; k];
            for (j, &row_j) in c.rows.iter().enumerate() {
                if j != i {
                    sums[c.label[j]] += dist.distance(c.rows[i], row_j);
                }
            }
            let a = sums[own] / (c.sizes[own] - 1) as f64;
            let b = (0..k)
                .filter(|&l| l != own)
                .map(|l| sums[l] / c.sizes[l] as f64)
                .fold(f64::INFINITY, f64::min);
            let denom = a.max(b);
            if denom > 0.0 {
                (b - a) / denom
            } else {
                0.0
            }
        })
        .collect();
    Ok(per_point.iter().sum::<f64>() / per_point.len() as f64)
}

/// Variance-ratio criterion with euclidean dispersion. Returns 0 when the
/// between-cluster dispersion is 0 and `f64::INFINITY` when only the
/// within-cluster dispersion is 0.
pub fn calinski_harabasz(points: Points<'_>, labels: &[i64]) -> Result<f64, EvalError> {
    let c = clustered(labels, points.len())?;
    let k = c.sizes.len();
    if k < 2 {
        return Err(EvalError::TooFewClusters(k));
    }
    let dim = points.dim();
    let n = c.rows.len();
    let mut global = vec![0.0f64; dim];
    let mut centroids = vec![vec![0.0f64; dim]; k];
    for (&row, &l) in c.rows.iter().zip(&c.label) {
        for (d, &x) in points.row(row).iter().enumerate() {
            global[d] += x as f64;
            centroids[l][d] += x as f64;
        }
    }
    global.iter_mut().for_each(|g| *g /= n as f64);
    for (centroid, &size) in centroids.iter_mut().zip(&c.sizes) {
        centroid.iter_mut().for_each(|v| *v /= size as f64);
    }
    let between: f64 = centroids
        .iter()
        .zip(&c.sizes)
        .map(|(m, &size)| {
            size as f64
                * m.iter()
                    .zip(&global)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
        })
        .sum();
    let within: f64 = c
        .rows
        .iter()
        .zip(&c.label)
        .map(|(&row, &l)| {
            points
                .row(row)
                .iter()
                .zip(&centroids[l])
                .map(|(&x, m)| (x as f64 - m) * (x as f64 - m))
                .sum::<f64>()
        })
        .sum();
    if between == 0.0 {
        return Ok(0.0);
    }
    if within == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok((between / (k - 1) as f64) / (within / (n - k) as f64))
}

fn check_clusters<L>(clusters: &[Vec<L>]) -> Result<(), EvalError> {
    if clusters.is_empty() {
        return Err(EvalError::NoClusters);
    }
    if let Some(i) = clusters.iter().position(Vec::is_empty) {
        return Err(EvalError::EmptyCluster(i));
    }
    Ok(())
}

/// Percentage of clusters whose members all carry the same truth label.
pub fn cluster_perfection<L: Ord>(clusters: &[Vec<L>]) -> Result<f64, EvalError> {
    check_clusters(clusters)?;
    let pure = clusters
        .iter()
        .filter(|members| members.iter().all(|m| *m == members[0]))
        .count();
    Ok(100.0 * pure as f64 / clusters.len() as f64)
}

/// Most frequent truth label in a cluster; ties go to the smallest label.
pub fn majority_label<L: Ord + Clone>(members: &[L]) -> Option<(L, usize)> {
    let mut counts: BTreeMap<&L, usize> = BTreeMap::new();
    for m in members {
        *counts.entry(m).or_insert(0) += 1;
    }
    // BTreeMap iterates ascending, and max_by_key keeps the last maximum, so walk in reverse
    counts
        .into_iter()
        .rev()
        .max_by_key(|(_, c)| *c)
        .map(|(l, c)| (l.clone(), c))
}

/// Mean over clusters of the fraction of members carrying the majority label, in percent.
pub fn intra_cluster_precision<L: Ord + Clone>(clusters: &[Vec<L>]) -> Result<f64, EvalError> {
    check_clusters(clusters)?;
    let total: f64 = clusters
        .iter()
        .map(|members| {
            let (_, count) = majority_label(members).expect("non-empty cluster");
            count as f64 / members.len() as f64
        })
        .sum();
    Ok(100.0 * total / clusters.len() as f64)
}

/// Truth labels for each cluster's members. `truth` maps call_id to its true
/// campaign, `None` for true outliers; each true outlier gets a distinct label
/// so a cluster containing one is never counted as pure.
pub fn truth_clusters(
    labels: &[i64],
    row_ids: &[String],
    truth: &HashMap<String, Option<String>>,
) -> Result<Vec<Vec<String>>, EvalError> {
    if labels.len() != row_ids.len() {
        return Err(EvalError::Misaligned {
            labels: labels.len(),
            rows: row_ids.len(),
        });
    }
    let mut groups: BTreeMap<i64, Vec<String>> = BTreeMap::new();
    for (&l, id) in labels.iter().zip(row_ids) {
        if l < 0 {
            continue;
        }
        let t = truth
            .get(id)
            .ok_or_else(|| EvalError::MissingTruth(id.clone()))?;
        let label = match t {
            Some(campaign) => campaign.clone(),
            None => format!("outlier:{id}"),
        };
        groups.entry(l).or_default().push(label);
    }
    Ok(groups.into_values().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: Metric,
    pub n_points: usize,
    pub n_clusters: usize,
    pub n_outliers_excluded: usize,
    pub silhouette: Option<f64>,
    /// `None` together with `calinski_harabasz_infinite` when within-cluster dispersion is 0.
    pub calinski_harabasz: Option<f64>,
    pub calinski_harabasz_infinite: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cluster_perfection: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub intra_cluster_precision: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub notes: Vec<String>,
}

/// Unsupervised scores; with fewer than two clusters they are left empty and a note is added.
pub fn evaluate(
    points: Points<'_>,
    labels: &[i64],
    metric: Metric,
) -> Result<EvalReport, EvalError> {
    let c = clustered(labels, points.len())?;
    let mut report = EvalReport {
        metric,
        n_points: labels.len(),
        n_clusters: c.sizes.len(),
        n_outliers_excluded: labels.len() - c.rows.len(),
        silhouette: None,
        calinski_harabasz: None,
        calinski_harabasz_infinite: false,
        cluster_perfection: None,
        intra_cluster_precision: None,
        notes: Vec::new(),
    };
    if c.sizes.len() < 2 {
        report.notes.push(format!(
            "need >=2 clusters for silhouette/CH, found {}",
            c.sizes.len()
        ));
        return Ok(report);
    }
    report.silhouette = Some(silhouette_score(points, labels, metric)?);
    let ch = calinski_harabasz(points, labels)?;
    if ch.is_infinite() {
        report.calinski_harabasz_infinite = true;
    } else {
        report.calinski_harabasz = Some(ch);
    }
    Ok(report)
}

/// Fills the ground-truth scores into an existing report.
pub fn add_truth_scores(
    report: &mut EvalReport,
    clusters: &[Vec<String>],
) -> Result<(), EvalError> {
    if clusters.is_empty() {
        report
            .notes
            .push("no clusters; truth scores skipped".into());
        return Ok(());
    }
    report.cluster_perfection = Some(cluster_perfection(clusters)?);
    report.intra_cluster_precision = Some(intra_cluster_precision(clusters)?);
    Ok(())
}
