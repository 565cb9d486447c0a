//! Distance of encoded datasets from the latent prior, K-Means clustering
//! with per-cluster error profiles, and 2D PCA projections.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chem_data::TaskKind;
use crate::seeding::rng_for;
use crate::stats::spearman;

#[derive(Debug, Error, PartialEq)]
pub enum LatentError {
    #[error("empty embedding set")]
    EmptySet,
    #[error("data rank too low for a 2D projection")]
    Rank,
    #[error("out-of-fold predictions missing for row {0}")]
    IncompleteOof(usize),
    #[error("shape error: {0}")]
    Shape(String),
}

fn row_kl(mu: &[f64], logvar: &[f64]) -> f64 {
    0.5 * mu
        .iter()
        .zip(logvar)
        .map(|(m, lv)| m * m + lv.exp() - 1.0 - lv)
        .sum::<f64>()
}

/// Mean over rows of the KL divergence between each row's Gaussian and the
/// standard normal prior.
pub fn dataset_prior_kl(mu: &[Vec<f64>], logvar: &[Vec<f64>]) -> Result<f64, LatentError> {
    if mu.is_empty() {
        return Err(LatentError::EmptySet);
    }
    if mu.len() != logvar.len() {
        return Err(LatentError::Shape("mu and logvar row counts differ".into()));
    }
    Ok(mu.iter().zip(logvar).map(|(m, l)| row_kl(m, l)).sum::<f64>() / mu.len() as f64)
}

/// Per-dimension z-scores; constant dimensions are only centered.
pub fn standardize_columns(points: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = points.len();
    if n == 0 {
        return Vec::new();
    }
    let d = points[0].len();
    let mut mean = vec![0.0; d];
    for p in points {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v / n as f64;
        }
    }
    let mut sd = vec![0.0; d];
    for p in points {
        for j in 0..d {
            sd[j] += (p[j] - mean[j]).powi(2) / n as f64;
        }
    }
    let sd: Vec<f64> = sd.into_iter().map(|v| if v > 0.0 { v.sqrt() } else { 1.0 }).collect();
    points
        .iter()
        .map(|p| (0..d).map(|j| (p[j] - mean[j]) / sd[j]).collect())
        .collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansResult {
    pub k: usize,
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    /// Inertia after every Lloyd iteration.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    centroids
        .iter()
        .enumerate()
        .map(|(i, c)| (i, sq_dist(p, c)))
        .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a })
}

/// Lloyd's algorithm from k-means++ seeds. When fewer than `k` distinct
/// points exist, `k` is reduced to that count.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, max_iter: usize) -> Result<KMeansResult, LatentError> {
    let n = points.len();
    if n == 0 || k == 0 {
        return Err(LatentError::EmptySet);
    }
    if n < k {
        return Err(LatentError::Shape(format!("{n} points cannot form {k} clusters")));
    }
    let mut distinct: Vec<&Vec<f64>> = Vec::new();
    for p in points {
        if !distinct.iter().any(|q| *q == p) {
            distinct.push(p);
            if distinct.len() >= k {
                break;
            }
        }
    }
    let k = if distinct.len() < k {
        log::warn!("kmeans: only {} distinct points; reducing k from {k}", distinct.len());
        distinct.len()
    } else {
        k
    };

    let mut rng = rng_for(seed, "kmeans/init");
    let mut centroids = vec![points[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let mut r = rng.random::<f64>() * total;
        let mut pick = n - 1;
        for (i, &w) in d2.iter().enumerate() {
            if w > 0.0 && r < w {
                pick = i;
                break;
            }
            r -= w;
        }
        if d2[pick] == 0.0 {
            pick = d2.iter().position(|&w| w > 0.0).expect("k distinct points exist");
        }
        centroids.push(points[pick].clone());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &centroids[centroids.len() - 1]));
        }
    }

    let d = points[0].len();
    let mut assignments = vec![usize::MAX; n];
    let mut history = Vec::new();
    let mut iterations = 0;
    for _ in 0..max_iter.max(1) {
        iterations += 1;
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let (c, _) = nearest(p, &centroids);
            if assignments[i] != c {
                assignments[i] = c;
                changed = true;
            }
        }
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        let inertia: f64 = points.iter().zip(&assignments).map(|(p, &a)| sq_dist(p, &centroids[a])).sum();
        log::debug!("kmeans iteration {iterations}: inertia {inertia}");
        history.push(inertia);
        if !changed {
            break;
        }
    }
    Ok(KMeansResult {
        k,
        assignments,
        centroids,
        inertia: *history.last().expect("at least one iteration"),
        inertia_history: history,
        iterations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pca2 {
    pub scores: Vec<[f64; 2]>,
    pub components: [Vec<f64>; 2],
    pub explained_variance_ratio: [f64; 2],
    pub mean: Vec<f64>,
}

impl Pca2 {
    /// Projects new points with the fitted centering and components.
    pub fn transform(&self, points: &[Vec<f64>]) -> Vec<[f64; 2]> {
        points
            .iter()
            .map(|p| {
                let c: Vec<f64> = p.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
                [0, 1].map(|k| c.iter().zip(&self.components[k]).map(|(a, b)| a * b).sum())
            })
            .collect()
    }
}

/// Top-two principal axes of the centered data. Each component's sign is
/// fixed so its largest-magnitude entry is positive.
pub fn pca2(points: &[Vec<f64>]) -> Result<Pca2, LatentError> {
    let n = points.len();
    if n < 3 {
        return Err(LatentError::Rank);
    }
    let d = points[0].len();
    if d < 2 || points.iter().any(|p| p.len() != d) {
        return Err(LatentError::Rank);
    }
    let mean: Vec<f64> = (0..d).map(|j| points.iter().map(|p| p[j]).sum::<f64>() / n as f64).collect();
    let x = DMatrix::from_fn(n, d, |i, j| points[i][j] - mean[j]);
    let cov = (x.transpose() * &x) / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    if !(total > 0.0) {
        return Err(LatentError::Rank);
    }
    let comp = |k: usize| -> Vec<f64> {
        let col = eig.eigenvectors.column(order[k]);
        let big = col.iter().fold(0.0f64, |a, &v| if v.abs() > a.abs() { v } else { a });
        let s = if big < 0.0 { -1.0 } else { 1.0 };
        col.iter().map(|v| v * s).collect()
    };
    let components = [comp(0), comp(1)];
    let ratio = [0, 1].map(|k| eig.eigenvalues[order[k]].max(0.0) / total);
    let mut pca = Pca2 {
        scores: Vec::new(),
        components,
        explained_variance_ratio: ratio,
        mean,
    };
    pca.scores = pca.transform(points);
    Ok(pca)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterProfile {
    pub cluster_id: usize,
    pub size: usize,
    pub kl_to_prior: f64,
    /// RMSE of members' out-of-fold predictions, or their error rate for
    /// classification.
    pub metric: f64,
    pub centroid: Vec<f64>,
}

/// Per-cluster prior distance and out-of-fold error, sorted by distance.
pub fn cluster_error_profile(
    mu: &[Vec<f64>],
    logvar: &[Vec<f64>],
    assignments: &[usize],
    y_true: &[f64],
    oof: &[f64],
    task: TaskKind,
) -> Result<Vec<ClusterProfile>, LatentError> {
    let n = mu.len();
    if n == 0 {
        return Err(LatentError::EmptySet);
    }
    if logvar.len() != n || assignments.len() != n || y_true.len() != n {
        return Err(LatentError::Shape("rows of mu, logvar, assignments and targets differ".into()));
    }
    if let Some(i) = (0..n).find(|&i| oof.get(i).is_none_or(|v| !v.is_finite())) {
        return Err(LatentError::IncompleteOof(i));
    }
    let k = assignments.iter().max().map_or(0, |m| m + 1);
    let d = mu[0].len();
    let mut out = Vec::new();
    for c in 0..k {
        let members: Vec<usize> = (0..n).filter(|&i| assignments[i] == c).collect();
        if members.is_empty() {
            continue;
        }
        let m = members.len() as f64;
        let kl = members.iter().map(|&i| row_kl(&mu[i], &logvar[i])).sum::<f64>() / m;
        let metric = match task {
            TaskKind::Regression => (members.iter().map(|&i| (y_true[i] - oof[i]).powi(2)).sum::<f64>() / m).sqrt(),
            TaskKind::Classification => {
                members.iter().filter(|&&i| (y_true[i] >= 0.5) != (oof[i] >= 0.5)).count() as f64 / m
            }
        };
        let centroid = (0..d).map(|j| members.iter().map(|&i| mu[i][j]).sum::<f64>() / m).collect();
        out.push(ClusterProfile {
            cluster_id: c,
            size: members.len(),
            kl_to_prior: kl,
            metric,
            centroid,
        });
    }
    out.sort_by(|a, b| a.kl_to_prior.total_cmp(&b.kl_to_prior).then(a.cluster_id.cmp(&b.cluster_id)));
    Ok(out)
}

/// Spearman correlation between cluster distance and error after dropping
/// the single cluster farthest from the prior.
pub fn kl_error_correlation_without_farthest(profiles: &[ClusterProfile]) -> f64 {
    let mut p: Vec<&ClusterProfile> = profiles.iter().collect();
    p.sort_by(|a, b| a.kl_to_prior.total_cmp(&b.kl_to_prior));
    p.pop();
    let kl: Vec<f64> = p.iter().map(|c| c.kl_to_prior).collect();
    let err: Vec<f64> = p.iter().map(|c| c.metric).collect();
    spearman(&kl, &err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prior_kl_examples() {
        assert_eq!(dataset_prior_kl(&[vec![0.0; 3]], &[vec![0.0; 3]]).unwrap(), 0.0);
        let kl = dataset_prior_kl(&[vec![1.0, 0.0, 0.0]], &[vec![0.0; 3]]).unwrap();
        assert!((kl - 0.5).abs() < 1e-12);
        assert_eq!(dataset_prior_kl(&[], &[]), Err(LatentError::EmptySet));
    }

    #[test]
    fn two_blobs_separate() {
        let mut pts = Vec::new();
        for i in 0..20 {
            let e = (i as f64) * 0.01;
            pts.push(vec![e, -e]);
            pts.push(vec![10.0 + e, 10.0 - e]);
        }
        let r = kmeans(&pts, 2, 3, 300).unwrap();
        for i in (0..40).step_by(2) {
            assert_eq!(r.assignments[i], r.assignments[0]);
            assert_ne!(r.assignments[i + 1], r.assignments[0]);
        }
        assert!(r.inertia_history.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }

    #[test]
    fn single_cluster_is_mean() {
        let pts = vec![vec![0.0, 1.0], vec![2.0, 3.0], vec![4.0, 8.0]];
        let r = kmeans(&pts, 1, 0, 300).unwrap();
        assert_eq!(r.centroids[0], vec![2.0, 4.0]);
        // total variance (population, summed over dims) times N
        assert!((r.inertia - (8.0 + 26.0)).abs() < 1e-12);
    }

    #[test]
    fn duplicate_points_reduce_k() {
        let pts = vec![vec![1.0], vec![1.0], vec![2.0], vec![2.0]];
        assert_eq!(kmeans(&pts, 3, 0, 10).unwrap().k, 2);
    }

    #[test]
    fn collinear_points_have_no_second_axis() {
        let pts: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 2.0 * i as f64, 1.0]).collect();
        let p = pca2(&pts).unwrap();
        assert!((p.explained_variance_ratio[0] - 1.0).abs() < 1e-12);
        assert!(p.explained_variance_ratio[1].abs() < 1e-12);
        assert_eq!(pca2(&vec![vec![1.0, 1.0]; 5]), Err(LatentError::Rank));
    }

    #[test]
    fn profile_of_single_cluster() {
        let mu = vec![vec![1.0], vec![0.0]];
        let lv = vec![vec![0.0], vec![0.0]];
        let p = cluster_error_profile(&mu, &lv, &[0, 0], &[1.0, 2.0], &[2.0, 2.0], TaskKind::Regression).unwrap();
        assert_eq!(p.len(), 1);
        assert!((p[0].kl_to_prior - 0.25).abs() < 1e-12);
        assert!((p[0].metric - 0.5f64.sqrt()).abs() < 1e-12);
        let missing = cluster_error_profile(&mu, &lv, &[0, 0], &[1.0, 2.0], &[2.0, f64::NAN], TaskKind::Regression);
        assert_eq!(missing, Err(LatentError::IncompleteOof(1)));
    }
}
