//! Count matrix ingestion checks, gene filtering, size factors and HVG selection.

use std::collections::HashSet;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_HVG: usize = 2000;
/// A gene must be detected (count > 0) in at least this many cells.
pub const MIN_CELLS_PER_GENE: usize = 3;

/// Cells × genes raw counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountMatrix {
    cell_ids: Vec<String>,
    gene_ids: Vec<String>,
    counts: Array2<f64>,
}

impl CountMatrix {
    pub fn new(cell_ids: Vec<String>, gene_ids: Vec<String>, counts: Array2<f64>) -> Result<Self> {
        if counts.dim() != (cell_ids.len(), gene_ids.len()) {
            return Err(Error::data(format!(
                "count matrix is {}x{} but there are {} cell ids and {} gene ids",
                counts.nrows(),
                counts.ncols(),
                cell_ids.len(),
                gene_ids.len()
            )));
        }
        check_unique(&cell_ids, "cell")?;
        check_unique(&gene_ids, "gene")?;
        if let Some(((i, j), v)) = counts.indexed_iter().find(|(_, v)| !(**v >= 0.0 && v.is_finite())) {
            return Err(Error::data(format!(
                "count for cell {} gene {} is {v}; counts must be finite and nonnegative",
                cell_ids[i], gene_ids[j]
            )));
        }
        Ok(Self {
            cell_ids,
            gene_ids,
            counts,
        })
    }

    pub fn cell_ids(&self) -> &[String] {
        &self.cell_ids
    }

    pub fn gene_ids(&self) -> &[String] {
        &self.gene_ids
    }

    pub fn counts(&self) -> &Array2<f64> {
        &self.counts
    }

    pub fn n_cells(&self) -> usize {
        self.cell_ids.len()
    }

    pub fn n_genes(&self) -> usize {
        self.gene_ids.len()
    }
}

fn check_unique(ids: &[String], what: &str) -> Result<()> {
    let mut seen = HashSet::with_capacity(ids.len());
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::data(format!("duplicate {what} id {id:?}")));
        }
    }
    Ok(())
}

/// Model-ready inputs derived from a [`CountMatrix`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessedData {
    pub cell_ids: Vec<String>,
    /// Column indices into the raw matrix, ascending.
    pub selected_genes: Vec<usize>,
    pub gene_ids: Vec<String>,
    /// Raw counts of the selected genes; the reconstruction target.
    pub raw_selected: Array2<f64>,
    pub size_factors: Array1<f64>,
    /// Per-gene z-scored `ln(1 + count / size_factor)`; the encoder input.
    pub features: Array2<f64>,
}

impl PreprocessedData {
    pub fn n_cells(&self) -> usize {
        self.cell_ids.len()
    }

    pub fn n_genes(&self) -> usize {
        self.gene_ids.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.cell_ids.len();
        let d = self.gene_ids.len();
        if self.selected_genes.len() != d
            || self.raw_selected.dim() != (n, d)
            || self.features.dim() != (n, d)
            || self.size_factors.len() != n
        {
            return Err(Error::data("preprocessed data has inconsistent shapes"));
        }
        if self.size_factors.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::data("size factors must be positive"));
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::data("features contain non-finite values"));
        }
        Ok(())
    }
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Per-cell total count divided by the median total.
pub fn size_factors(counts: &Array2<f64>, cell_ids: &[String]) -> Result<Array1<f64>> {
    let totals = counts.sum_axis(Axis(1));
    if let Some(i) = totals.iter().position(|&t| t <= 0.0) {
        return Err(Error::data(format!("cell {} has zero total counts", cell_ids[i])));
    }
    let med = median(totals.as_slice().expect("contiguous"));
    Ok(totals / med)
}

/// Filters genes, computes size factors and keeps the `n_hvg` most variable genes.
pub fn preprocess(raw: &CountMatrix, n_hvg: usize) -> Result<PreprocessedData> {
    let n = raw.n_cells();
    if n < 2 {
        return Err(Error::data(format!("need at least 2 cells, got {n}")));
    }
    if n_hvg == 0 {
        return Err(Error::config("number of highly variable genes must be >= 1"));
    }
    let sf = size_factors(&raw.counts, &raw.cell_ids)?;

    // (gene, log-normalized column, population variance)
    let mut candidates: Vec<(usize, Array1<f64>, f64)> = Vec::new();
    for (g, col) in raw.counts.axis_iter(Axis(1)).enumerate() {
        let detected = col.iter().filter(|&&c| c > 0.0).count();
        if detected < MIN_CELLS_PER_GENE {
            continue;
        }
        let logged: Array1<f64> = col.iter().zip(&sf).map(|(&c, &s)| (c / s).ln_1p()).collect();
        let var = logged.var(0.0);
        if var > 0.0 {
            candidates.push((g, logged, var));
        }
    }
    if candidates.is_empty() {
        return Err(Error::data("no gene passes the expression filter"));
    }
    candidates.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
    candidates.truncate(n_hvg);
    candidates.sort_by_key(|c| c.0);

    let d = candidates.len();
    let mut features = Array2::zeros((n, d));
    let mut raw_selected = Array2::zeros((n, d));
    for (j, (g, logged, var)) in candidates.iter().enumerate() {
        let mean = logged.mean().expect("nonempty");
        let sd = var.sqrt();
        features.column_mut(j).assign(&logged.mapv(|v| (v - mean) / sd));
        raw_selected.column_mut(j).assign(&raw.counts.column(*g));
    }
    let selected_genes: Vec<usize> = candidates.iter().map(|c| c.0).collect();
    Ok(PreprocessedData {
        cell_ids: raw.cell_ids.clone(),
        gene_ids: selected_genes.iter().map(|&g| raw.gene_ids[g].clone()).collect(),
        selected_genes,
        raw_selected,
        size_factors: sf,
        features,
    })
}
