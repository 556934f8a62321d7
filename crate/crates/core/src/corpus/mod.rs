//! Cell-by-gene expression matrices and the preprocessing pipeline:
//! zero-library filtering, Seurat-v3 highly-variable-gene selection,
//! library-size normalization with `log1p`, stratified 90/5/5 splits, plus a
//! synthetic generator with a known noise floor and the XMAT file format.

mod hvg;
mod preprocess;
mod split;
mod synth;
mod xmat;

pub use hvg::{select_hvg, standardized_variances};
pub use preprocess::{filter_zero_library, normalize_log1p, subset_genes, DEFAULT_TARGET_SUM};
pub use split::{split, SplitAssignment, SplitTag, RARE_STRATUM_MIN};
pub use synth::{synthesize, synthesize_with_signal, SyntheticSpec};
pub use xmat::{load_matrix, save_matrix, sidecar_path, HEADER_LEN, MAGIC, TRAILER_LEN, VERSION};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("no cells left in corpus")]
    EmptyCorpus,
    #[error("cell {cell} has an all-zero library")]
    ZeroLibrary { cell: usize },
    #[error("expected a {expected:?} matrix, got {found:?}")]
    WrongStage { expected: Stage, found: Stage },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("malformed matrix file: {0}")]
    Format(String),
    #[error("payload checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Checksum { stored: u32, computed: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("sidecar: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = CorpusError> = std::result::Result<T, E>;

/// Processing stage of a matrix's values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    RawCounts,
    NormalizedLog1p,
}

impl Stage {
    pub fn code(self) -> u8 {
        match self {
            Stage::RawCounts => 0,
            Stage::NormalizedLog1p => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Stage::RawCounts),
            1 => Some(Stage::NormalizedLog1p),
            _ => None,
        }
    }
}

/// Dense cells x genes matrix with metadata. Immutable once built; the
/// `with_*` methods consume and return a new value.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionMatrix {
    n_cells: usize,
    n_genes: usize,
    values: Vec<f32>,
    gene_names: Vec<String>,
    cell_labels: Option<Vec<String>>,
    stage: Stage,
    split: Option<SplitAssignment>,
    provenance: String,
}

impl ExpressionMatrix {
    pub fn new(
        n_cells: usize,
        n_genes: usize,
        values: Vec<f32>,
        gene_names: Vec<String>,
        stage: Stage,
    ) -> Result<Self> {
        if values.len() != n_cells * n_genes {
            return Err(CorpusError::InvalidArgument(format!(
                "{n_cells} x {n_genes} matrix needs {} values, got {}",
                n_cells * n_genes,
                values.len()
            )));
        }
        if gene_names.len() != n_genes {
            return Err(CorpusError::InvalidArgument(format!(
                "{} gene names for {n_genes} genes",
                gene_names.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(CorpusError::InvalidArgument(format!(
                "value at cell {}, gene {} is negative or non-finite",
                pos / n_genes.max(1),
                pos % n_genes.max(1)
            )));
        }
        Ok(Self {
            n_cells,
            n_genes,
            values,
            gene_names,
            cell_labels: None,
            stage,
            split: None,
            provenance: String::new(),
        })
    }

    /// Matrix with generated gene names `g0000, g0001, ...`.
    pub fn with_default_names(
        n_cells: usize,
        n_genes: usize,
        values: Vec<f32>,
        stage: Stage,
    ) -> Result<Self> {
        Self::new(n_cells, n_genes, values, default_gene_names(n_genes), stage)
    }

    pub fn with_cell_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.n_cells {
            return Err(CorpusError::InvalidArgument(format!(
                "{} labels for {} cells",
                labels.len(),
                self.n_cells
            )));
        }
        self.cell_labels = Some(labels);
        Ok(self)
    }

    pub fn with_split(mut self, split: SplitAssignment) -> Result<Self> {
        if split.tags().len() != self.n_cells {
            return Err(CorpusError::InvalidArgument(format!(
                "split covers {} cells, matrix has {}",
                split.tags().len(),
                self.n_cells
            )));
        }
        self.split = Some(split);
        Ok(self)
    }

    pub fn with_provenance(mut self, provenance: impl Into<String>) -> Self {
        self.provenance = provenance.into();
        self
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn n_genes(&self) -> usize {
        self.n_genes
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, cell: usize) -> &[f32] {
        &self.values[cell * self.n_genes..(cell + 1) * self.n_genes]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.values.chunks_exact(self.n_genes.max(1))
    }

    pub fn gene_names(&self) -> &[String] {
        &self.gene_names
    }

    pub fn cell_labels(&self) -> Option<&[String]> {
        self.cell_labels.as_deref()
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn split(&self) -> Option<&SplitAssignment> {
        self.split.as_ref()
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    /// Indices of the cells carrying `tag`; empty when no split is attached.
    pub fn cells_tagged(&self, tag: SplitTag) -> Vec<usize> {
        self.split
            .as_ref()
            .map(|s| s.indices(tag))
            .unwrap_or_default()
    }

    pub(crate) fn expect_stage(&self, expected: Stage) -> Result<()> {
        if self.stage == expected {
            Ok(())
        } else {
            Err(CorpusError::WrongStage {
                expected,
                found: self.stage,
            })
        }
    }
}

pub fn default_gene_names(n: usize) -> Vec<String> {
    (0..n).map(|g| format!("g{g:04}")).collect()
}
