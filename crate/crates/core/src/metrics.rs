//! External clustering validation: NMI and ARI.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Co-occurrence counts of two labelings, with labels compacted to `0..r` and `0..c`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContingencyTable {
    counts: Vec<Vec<u64>>,
    row_sums: Vec<u64>,
    col_sums: Vec<u64>,
    total: u64,
}

impl ContingencyTable {
    pub fn new(labels: &[usize], pred: &[usize]) -> Result<Self> {
        if labels.len() != pred.len() {
            return Err(Error::ShapeMismatch {
                context: "label vectors",
                expected: labels.len(),
                actual: pred.len(),
            });
        }
        let rows = compact(labels);
        let cols = compact(pred);
        let r = rows.iter().max().map_or(0, |m| m + 1);
        let c = cols.iter().max().map_or(0, |m| m + 1);
        let mut counts = vec![vec![0u64; c]; r];
        for (&i, &j) in rows.iter().zip(&cols) {
            counts[i][j] += 1;
        }
        let row_sums = counts.iter().map(|row| row.iter().sum()).collect();
        let col_sums = (0..c).map(|j| counts.iter().map(|row| row[j]).sum()).collect();
        Ok(Self {
            counts,
            row_sums,
            col_sums,
            total: labels.len() as u64,
        })
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn row_sums(&self) -> &[u64] {
        &self.row_sums
    }

    pub fn col_sums(&self) -> &[u64] {
        &self.col_sums
    }

    pub fn total(&self) -> u64 {
        self.total
    }
}

/// Maps arbitrary labels to `0..k`, preserving their sorted order.
fn compact(labels: &[usize]) -> Vec<usize> {
    let mut ids: BTreeMap<usize, usize> = labels.iter().map(|&l| (l, 0)).collect();
    for (rank, id) in ids.values_mut().enumerate() {
        *id = rank;
    }
    labels.iter().map(|l| ids[l]).collect()
}

fn entropy(marginals: &[u64], n: f64) -> f64 {
    marginals
        .iter()
        .filter(|&&m| m > 0)
        .map(|&m| {
            let p = m as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information with the geometric-mean normalizer, natural logs.
///
/// Returns 1 when both labelings are single-cluster and 0 when exactly one is.
pub fn nmi(labels: &[usize], pred: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::domain("nmi needs at least one sample"));
    }
    let table = ContingencyTable::new(labels, pred)?;
    let n = table.total as f64;
    let h_true = entropy(&table.row_sums, n);
    let h_pred = entropy(&table.col_sums, n);
    let single_true = table.row_sums.len() == 1;
    let single_pred = table.col_sums.len() == 1;
    if single_true && single_pred {
        return Ok(1.0);
    }
    if single_true || single_pred {
        return Ok(0.0);
    }
    let mut mi = 0.0;
    for (i, row) in table.counts.iter().enumerate() {
        for (j, &nij) in row.iter().enumerate() {
            if nij == 0 {
                continue;
            }
            let nij = nij as f64;
            let a = table.row_sums[i] as f64;
            let b = table.col_sums[j] as f64;
            mi += nij / n * (n * nij / (a * b)).ln();
        }
    }
    Ok((mi / (h_true * h_pred).sqrt()).clamp(0.0, 1.0))
}

fn choose2(x: u64) -> f64 {
    (x * x.saturating_sub(1)) as f64 / 2.0
}

/// Adjusted Rand index. Identical partitions score 1, including the
/// degenerate cases where the chance-corrected denominator vanishes.
pub fn ari(labels: &[usize], pred: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::domain("ari needs at least one sample"));
    }
    let table = ContingencyTable::new(labels, pred)?;
    let index: f64 = table.counts.iter().flatten().map(|&c| choose2(c)).sum();
    let sum_a: f64 = table.row_sums.iter().map(|&a| choose2(a)).sum();
    let sum_b: f64 = table.col_sums.iter().map(|&b| choose2(b)).sum();
    let pairs = choose2(table.total);
    if pairs == 0.0 {
        return Ok(1.0);
    }
    let expected = sum_a * sum_b / pairs;
    let max_index = 0.5 * (sum_a + sum_b);
    let denom = max_index - expected;
    if denom == 0.0 {
        // only reachable when both partitions are all-singletons or both single-cluster
        return Ok(1.0);
    }
    Ok((index - expected) / denom)
}

/// Metrics JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub nmi: f64,
    pub ari: f64,
    pub n: usize,
    pub clusters_true: usize,
    pub clusters_pred: usize,
}

impl MetricsReport {
    /// Scores in `[0,1]`/`[-1,1]`; multiply by 100 for table-style output.
    pub fn compute(labels: &[usize], pred: &[usize]) -> Result<Self> {
        let table = ContingencyTable::new(labels, pred)?;
        Ok(Self {
            nmi: nmi(labels, pred)?,
            ari: ari(labels, pred)?,
            n: labels.len(),
            clusters_true: table.row_sums.len(),
            clusters_pred: table.col_sums.len(),
        })
    }

    pub fn scaled(&self) -> Self {
        Self {
            nmi: self.nmi * 100.0,
            ari: self.ari * 100.0,
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identical_labelings_score_one() {
        let l = [0, 0, 1, 1, 2, 2, 2];
        assert!((nmi(&l, &l).unwrap() - 1.0).abs() < 1e-12);
        assert!((ari(&l, &l).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn relabeling_is_invisible() {
        let l = [0, 0, 1, 1, 2, 2, 2];
        let p = [7, 7, 3, 3, 5, 5, 5];
        assert!((nmi(&l, &p).unwrap() - 1.0).abs() < 1e-12);
        assert!((ari(&l, &p).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn crossed_labelings() {
        let l = [0, 0, 1, 1];
        let p = [0, 1, 0, 1];
        assert!(nmi(&l, &p).unwrap().abs() < 1e-12);
        assert!((ari(&l, &p).unwrap() + 0.5).abs() < 1e-12);
    }

    #[test]
    fn degenerate_partitions() {
        assert_eq!(nmi(&[0, 0, 0], &[1, 1, 1]).unwrap(), 1.0);
        assert_eq!(ari(&[0, 0, 0], &[1, 1, 1]).unwrap(), 1.0);
        assert_eq!(nmi(&[0, 0, 0], &[0, 1, 2]).unwrap(), 0.0);
        assert_eq!(ari(&[0, 1, 2], &[2, 0, 1]).unwrap(), 1.0);
        assert_eq!(ari(&[4], &[9]).unwrap(), 1.0);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(nmi(&[0, 1], &[0]).is_err());
        assert!(ari(&[0, 1], &[0]).is_err());
    }

    #[test]
    fn report_scales_to_percent() {
        let r = MetricsReport::compute(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap().scaled();
        assert!((r.nmi - 100.0).abs() < 1e-9);
        assert!((r.ari - 100.0).abs() < 1e-9);
        assert_eq!((r.n, r.clusters_true, r.clusters_pred), (4, 2, 2));
    }

    proptest! {
        #[test]
        fn metrics_are_permutation_invariant(
            labels in proptest::collection::vec(0usize..4, 2..40),
            pred_seed in proptest::collection::vec(0usize..4, 40),
            shift in 1usize..4,
        ) {
            let pred: Vec<usize> = pred_seed[..labels.len()].to_vec();
            let relabeled: Vec<usize> = pred.iter().map(|p| (p + shift) % 4 + 10).collect();
            let a = ari(&labels, &pred).unwrap();
            let b = ari(&labels, &relabeled).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            let m = nmi(&labels, &pred).unwrap();
            let k = nmi(&labels, &relabeled).unwrap();
            prop_assert!((m - k).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&m));
            prop_assert!((-1.0..=1.0).contains(&a));
        }
    }
}
