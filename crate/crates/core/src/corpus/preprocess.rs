use super::{CorpusError, ExpressionMatrix, Result, Stage};

pub const DEFAULT_TARGET_SUM: f64 = 1e4;

/// Drops cells whose library (row sum) is zero, keeping the survivors in order.
pub fn filter_zero_library(m: &ExpressionMatrix) -> Result<ExpressionMatrix> {
    m.expect_stage(Stage::RawCounts)?;
    let keep: Vec<usize> = (0..m.n_cells())
        .filter(|&c| m.row(c).iter().any(|&v| v > 0.0))
        .collect();
    if keep.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    if keep.len() == m.n_cells() {
        return Ok(m.clone());
    }
    let mut values = Vec::with_capacity(keep.len() * m.n_genes());
    for &c in &keep {
        values.extend_from_slice(m.row(c));
    }
    let labels = m
        .cell_labels()
        .map(|l| keep.iter().map(|&c| l[c].clone()).collect::<Vec<_>>());
    let mut out = ExpressionMatrix::new(
        keep.len(),
        m.n_genes(),
        values,
        m.gene_names().to_vec(),
        Stage::RawCounts,
    )?
    .with_provenance(m.provenance());
    if let Some(labels) = labels {
        out = out.with_cell_labels(labels)?;
    }
    Ok(out)
}

/// Keeps only `genes`, in the given order. Cell metadata carries over; any
/// split is dropped because it was computed for the old matrix.
pub fn subset_genes(m: &ExpressionMatrix, genes: &[usize]) -> Result<ExpressionMatrix> {
    if let Some(&bad) = genes.iter().find(|&&g| g >= m.n_genes()) {
        return Err(CorpusError::InvalidArgument(format!(
            "gene index {bad} out of range for {} genes",
            m.n_genes()
        )));
    }
    let mut values = Vec::with_capacity(m.n_cells() * genes.len());
    for row in m.rows() {
        values.extend(genes.iter().map(|&g| row[g]));
    }
    let names = genes.iter().map(|&g| m.gene_names()[g].clone()).collect();
    let mut out = ExpressionMatrix::new(m.n_cells(), genes.len(), values, names, m.stage())?
        .with_provenance(m.provenance());
    if let Some(labels) = m.cell_labels() {
        out = out.with_cell_labels(labels.to_vec())?;
    }
    Ok(out)
}

/// Scales every cell to `target_sum` total counts, then applies `ln(1 + x)`.
pub fn normalize_log1p(m: &ExpressionMatrix, target_sum: f64) -> Result<ExpressionMatrix> {
    m.expect_stage(Stage::RawCounts)?;
    if !(target_sum > 0.0 && target_sum.is_finite()) {
        return Err(CorpusError::InvalidArgument(format!(
            "target sum must be positive, got {target_sum}"
        )));
    }
    let mut values = Vec::with_capacity(m.values().len());
    for (c, row) in m.rows().enumerate() {
        let lib: f64 = row.iter().map(|&v| f64::from(v)).sum();
        if lib <= 0.0 {
            return Err(CorpusError::ZeroLibrary { cell: c });
        }
        let s = target_sum / lib;
        values.extend(row.iter().map(|&v| (f64::from(v) * s).ln_1p() as f32));
    }
    let mut out = ExpressionMatrix::new(
        m.n_cells(),
        m.n_genes(),
        values,
        m.gene_names().to_vec(),
        Stage::NormalizedLog1p,
    )?
    .with_provenance(m.provenance());
    if let Some(labels) = m.cell_labels() {
        out = out.with_cell_labels(labels.to_vec())?;
    }
    Ok(out)
}
