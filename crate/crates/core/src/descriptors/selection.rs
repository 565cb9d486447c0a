//! Descriptor filtering and correlation-based selection, plus synthetic
//! noisy descriptors with a prescribed correlation to the target.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::DescriptorError;
use crate::stats::{mean, quantile, sample_std, sample_variance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnSource {
    Native,
    Ingested,
}

/// Column-named N×K matrix of descriptor values, stored column-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorMatrix {
    pub names: Vec<String>,
    pub columns: Vec<Vec<f64>>,
    pub sources: Vec<ColumnSource>,
}

impl DescriptorMatrix {
    pub fn new(names: Vec<String>, columns: Vec<Vec<f64>>, sources: Vec<ColumnSource>) -> Result<Self, DescriptorError> {
        if names.len() != columns.len() || names.len() != sources.len() {
            return Err(DescriptorError::Shape("names, columns and sources differ in length".into()));
        }
        if let Some(first) = columns.first() {
            if columns.iter().any(|c| c.len() != first.len()) {
                return Err(DescriptorError::Shape("ragged columns".into()));
            }
        }
        Ok(Self { names, columns, sources })
    }

    /// Builds an all-ingested matrix from a loaded dataset.
    pub fn from_dataset(ds: &crate::chem_data::Dataset) -> Self {
        let columns = (0..ds.descriptor_names.len())
            .map(|j| ds.records.iter().map(|r| r.descriptors[j]).collect())
            .collect();
        Self {
            names: ds.descriptor_names.clone(),
            columns,
            sources: vec![ColumnSource::Ingested; ds.descriptor_names.len()],
        }
    }

    pub fn n_rows(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.names.iter().position(|n| n == name).map(|i| self.columns[i].as_slice())
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            names: self.names.clone(),
            columns: self.columns.iter().map(|c| rows.iter().map(|&r| c[r]).collect()).collect(),
            sources: self.sources.clone(),
        }
    }

    fn keep_columns(&self, keep: &[usize]) -> Self {
        Self {
            names: keep.iter().map(|&i| self.names[i].clone()).collect(),
            columns: keep.iter().map(|&i| self.columns[i].clone()).collect(),
            sources: keep.iter().map(|&i| self.sources[i]).collect(),
        }
    }
}

/// Keeps columns whose sample variance is strictly greater than `threshold`.
pub fn variance_filter(m: &DescriptorMatrix, threshold: f64) -> Result<DescriptorMatrix, DescriptorError> {
    if m.n_rows() < 2 {
        return Err(DescriptorError::Shape("variance filter needs at least two rows".into()));
    }
    let keep: Vec<usize> = (0..m.n_cols())
        .filter(|&j| sample_variance(&m.columns[j]) > threshold)
        .collect();
    if keep.is_empty() {
        return Err(DescriptorError::EmptySelection);
    }
    Ok(m.keep_columns(&keep))
}

/// Row indices that survive the outlier rule: a row is dropped when any
/// column with non-zero IQR has a value more than `factor` IQRs from that
/// column's median.
pub fn outlier_free_rows(m: &DescriptorMatrix, factor: f64) -> Vec<usize> {
    let mut keep = vec![true; m.n_rows()];
    for col in &m.columns {
        let med = quantile(col, 0.5);
        let iqr = quantile(col, 0.75) - quantile(col, 0.25);
        if iqr <= 0.0 {
            continue;
        }
        for (k, &v) in keep.iter_mut().zip(col) {
            if (v - med).abs() > factor * iqr {
                *k = false;
            }
        }
    }
    keep.iter().enumerate().filter(|(_, &k)| k).map(|(i, _)| i).collect()
}

/// Sample Pearson correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, DescriptorError> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(DescriptorError::Shape(format!(
            "pearson needs equal lengths >= 2, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(DescriptorError::DegenerateColumn);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionEntry {
    pub name: String,
    pub r: f64,
    pub kept: bool,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    /// Every ranked column, in rank order.
    pub entries: Vec<SelectionEntry>,
    pub selected: Vec<String>,
    pub selected_r: Vec<f64>,
    /// Set when fewer than `k` columns survived.
    pub short: bool,
}

/// Ranks columns by |r| with the target, then greedily keeps columns whose
/// |r| with every already-kept column is at most `intercorr_cut`, stopping
/// after `k`.
pub fn select_descriptors(
    m: &DescriptorMatrix,
    target: &[f64],
    k: usize,
    intercorr_cut: f64,
) -> Result<SelectionReport, DescriptorError> {
    if target.len() != m.n_rows() {
        return Err(DescriptorError::Shape("target length differs from row count".into()));
    }
    let mut ranked: Vec<(usize, f64)> = Vec::new();
    let mut entries_unranked = Vec::new();
    for j in 0..m.n_cols() {
        match pearson(&m.columns[j], target) {
            Ok(r) => ranked.push((j, r)),
            Err(DescriptorError::DegenerateColumn) => {
                if sample_variance(target) == 0.0 {
                    return Err(DescriptorError::DegenerateColumn);
                }
                entries_unranked.push(SelectionEntry {
                    name: m.names[j].clone(),
                    r: 0.0,
                    kept: false,
                    reason: "constant column".into(),
                });
            }
            Err(e) => return Err(e),
        }
    }
    ranked.sort_by(|a, b| b.1.abs().total_cmp(&a.1.abs()).then(a.0.cmp(&b.0)));

    let mut kept: Vec<usize> = Vec::new();
    let mut entries = Vec::with_capacity(m.n_cols());
    for &(j, r) in &ranked {
        if kept.len() == k {
            entries.push(SelectionEntry {
                name: m.names[j].clone(),
                r,
                kept: false,
                reason: "beyond top-k".into(),
            });
            continue;
        }
        let mut clash = None;
        for &i in &kept {
            let rij = pearson(&m.columns[i], &m.columns[j]).unwrap_or(0.0);
            if rij.abs() > intercorr_cut {
                clash = Some((i, rij));
                break;
            }
        }
        match clash {
            Some((i, rij)) => entries.push(SelectionEntry {
                name: m.names[j].clone(),
                r,
                kept: false,
                reason: format!("intercorrelated with {} (r = {rij:.3})", m.names[i]),
            }),
            None => {
                kept.push(j);
                entries.push(SelectionEntry {
                    name: m.names[j].clone(),
                    r,
                    kept: true,
                    reason: format!("rank {}", kept.len()),
                });
            }
        }
    }
    entries.extend(entries_unranked);
    let short = kept.len() < k;
    if short {
        log::warn!("only {} of {k} descriptors survived selection", kept.len());
    }
    let lookup = |j: usize| ranked.iter().find(|(c, _)| *c == j).map(|(_, r)| *r).unwrap_or(0.0);
    Ok(SelectionReport {
        selected: kept.iter().map(|&j| m.names[j].clone()).collect(),
        selected_r: kept.iter().map(|&j| lookup(j)).collect(),
        entries,
        short,
    })
}

/// Standard deviation of the Gaussian noise that attenuates a correlation
/// `r` down to `r_target` for a column with standard deviation `sigma`.
pub fn noise_scale(r: f64, r_target: f64, sigma: f64) -> f64 {
    sigma * ((r / r_target).powi(2) - 1.0).max(0.0).sqrt()
}

/// Maximum accepted gap between the achieved and requested correlation.
pub const NOISE_MATCH_TOLERANCE: f64 = 0.03;
const NOISE_ATTEMPTS: usize = 10;

/// Adds i.i.d. Gaussian noise to `d` so that its correlation with `y` drops
/// to `r_target`. Redraws up to ten times until the empirical correlation
/// lands within [`NOISE_MATCH_TOLERANCE`]; otherwise returns the closest
/// draw.
pub fn noisy_descriptor(d: &[f64], y: &[f64], r_target: f64, seed: u64) -> Result<Vec<f64>, DescriptorError> {
    let r = pearson(d, y)?;
    if r_target == 0.0 || r_target.signum() != r.signum() || r_target.abs() > r.abs() {
        return Err(DescriptorError::InvalidTargetCorrelation { r, r_target });
    }
    let s = noise_scale(r, r_target, sample_std(d));
    if s == 0.0 {
        return Ok(d.to_vec());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, Vec<f64>)> = None;
    for _ in 0..NOISE_ATTEMPTS {
        let noisy: Vec<f64> = d
            .iter()
            .map(|&v| {
                let e: f64 = StandardNormal.sample(&mut rng);
                v + s * e
            })
            .collect();
        let gap = (pearson(&noisy, y)? - r_target).abs();
        if best.as_ref().is_none_or(|(g, _)| gap < *g) {
            best = Some((gap, noisy));
        }
        if gap <= NOISE_MATCH_TOLERANCE {
            break;
        }
    }
    let (gap, out) = best.expect("at least one attempt");
    if gap > NOISE_MATCH_TOLERANCE {
        log::warn!("noisy descriptor missed r_target {r_target} by {gap:.4}");
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(cols: Vec<(&str, Vec<f64>)>) -> DescriptorMatrix {
        let n = cols.len();
        let (names, columns): (Vec<_>, Vec<_>) = cols.into_iter().map(|(a, b)| (a.to_string(), b)).unzip();
        DescriptorMatrix::new(names, columns, vec![ColumnSource::Ingested; n]).unwrap()
    }

    #[test]
    fn variance_filter_boundaries() {
        // sample variance of [0, 1] is exactly 0.5
        let m = matrix(vec![
            ("const", vec![3.0, 3.0]),
            ("half", vec![0.0, 1.0]),
            ("wide", vec![0.0, 10.0]),
        ]);
        let f = variance_filter(&m, 0.5).unwrap();
        assert_eq!(f.names, vec!["wide"]);
        let m = matrix(vec![("const", vec![1.0, 1.0, 1.0])]);
        assert!(matches!(variance_filter(&m, 0.5), Err(DescriptorError::EmptySelection)));
    }

    #[test]
    fn pearson_examples() {
        assert!((pearson(&[1., 2., 3.], &[2., 4., 6.]).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&[1., 2., 3.], &[6., 4., 2.]).unwrap() + 1.0).abs() < 1e-12);
        assert!((pearson(&[1., 2., 3., 4.], &[1., 3., 2., 4.]).unwrap() - 0.8).abs() < 1e-12);
        assert!(matches!(pearson(&[1., 1.], &[1., 2.]), Err(DescriptorError::DegenerateColumn)));
    }

    #[test]
    fn selection_drops_duplicate_column_and_respects_k() {
        let y = vec![1.0, 2.0, 3.0, 4.0, 5.0];
        let m = matrix(vec![
            ("a", vec![1.0, 2.1, 2.9, 4.2, 5.0]),
            ("a_copy", vec![1.0, 2.1, 2.9, 4.2, 5.0]),
            ("b", vec![2.0, 1.0, 4.0, 3.0, 5.0]),
        ]);
        let rep = select_descriptors(&m, &y, 3, 0.9).unwrap();
        assert_eq!(rep.selected, vec!["a", "b"]);
        assert!(rep.short);
        let one = select_descriptors(&m, &y, 1, 0.9).unwrap();
        assert_eq!(one.selected.len(), 1);
        assert_eq!(one.selected[0], "a");
    }

    #[test]
    fn noise_scale_example() {
        assert!((noise_scale(0.8, 0.4, 1.0) - 3f64.sqrt()).abs() < 1e-12);
        assert_eq!(noise_scale(0.8, 0.8, 2.0), 0.0);
    }

    #[test]
    fn noisy_descriptor_edges() {
        let y: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let d: Vec<f64> = y.iter().map(|v| v * 2.0 + (v * 0.7).sin() * 10.0).collect();
        let r = pearson(&d, &y).unwrap();
        assert_eq!(noisy_descriptor(&d, &y, r, 1).unwrap(), d);
        assert!(matches!(
            noisy_descriptor(&d, &y, -0.3, 1),
            Err(DescriptorError::InvalidTargetCorrelation { .. })
        ));
        assert!(noisy_descriptor(&d, &y, r.min(1.0) + 0.01, 1).is_err());
    }

    #[test]
    fn outlier_rule() {
        let mut col: Vec<f64> = (0..20).map(|i| i as f64).collect();
        col.push(1000.0);
        let flat = vec![0.0; 21];
        let m = matrix(vec![("x", col), ("flat", flat)]);
        let keep = outlier_free_rows(&m, 5.0);
        assert_eq!(keep.len(), 20);
        assert!(!keep.contains(&20));
    }
}
