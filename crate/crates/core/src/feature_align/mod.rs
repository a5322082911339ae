//! Projects arbitrary-width node features into the unified `d`-wide space:
//! PCA, zero-padding, then column-wise standard scaling over nodes.

mod pca;

use serde::{Deserialize, Serialize};

use crate::error::{GiltError, Result};
use crate::numerics::{pairwise_sum, Matrix};

pub use pca::{column_variances, fit_pca, PcaMethod, PcaModel, DEGENERATE_RATIO};

/// Column standard deviations at or below this are treated as constant.
pub const CONSTANT_SD: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlignMode {
    Pad,
    LearnableProjection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignSpec {
    pub unified_dim: usize,
    /// PCA width before the learnable projection (projection mode only).
    pub intermediate_dim: usize,
    pub mode: AlignMode,
    /// Above `rows × cols` entries, PCA switches to the incremental method.
    pub incremental_threshold: usize,
}

impl AlignSpec {
    pub fn pad(unified_dim: usize) -> Self {
        AlignSpec {
            unified_dim,
            intermediate_dim: unified_dim,
            mode: AlignMode::Pad,
            incremental_threshold: 10_000_000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.unified_dim == 0 {
            return Err(GiltError::InvalidSpec("unified_dim must be >= 1".into()));
        }
        if self.intermediate_dim == 0 || self.intermediate_dim > self.unified_dim {
            return Err(GiltError::InvalidSpec(format!(
                "intermediate_dim {} must be in 1..={}",
                self.intermediate_dim, self.unified_dim
            )));
        }
        Ok(())
    }

    /// Width of [`AlignedFeatures::matrix`].
    pub fn output_dim(&self) -> usize {
        match self.mode {
            AlignMode::Pad => self.unified_dim,
            AlignMode::LearnableProjection => self.intermediate_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignedFeatures {
    /// Scaled features, `n × spec.output_dim()`. In projection mode these
    /// still go through the learnable map (and a second scaling) in the model.
    pub matrix: Matrix,
    /// PCA output after padding, before scaling.
    pub unscaled: Matrix,
    pub pca: PcaModel,
    pub column_mean: Vec<f64>,
    pub column_sd: Vec<f64>,
    /// Output columns that are identically zero (padding or zero variance).
    pub zero_columns: Vec<usize>,
    /// Some PCA direction carried no variance.
    pub degenerate: bool,
    pub mode: AlignMode,
}

/// Standardizes every column over rows; constant columns become all-zero.
/// Returns the scaled matrix with the per-column mean and sd used.
pub fn standard_scale(x: &Matrix) -> (Matrix, Vec<f64>, Vec<f64>) {
    let (n, d) = x.shape();
    let mut out = Matrix::zeros(n, d);
    let mut means = Vec::with_capacity(d);
    let mut sds = Vec::with_capacity(d);
    for c in 0..d {
        let col = x.column(c);
        let mu = pairwise_sum(&col) / n as f64;
        let sq: Vec<f64> = col.iter().map(|v| (v - mu).powi(2)).collect();
        let sd = (pairwise_sum(&sq) / n as f64).sqrt();
        means.push(mu);
        sds.push(sd);
        if sd <= CONSTANT_SD {
            continue;
        }
        for r in 0..n {
            out.set(r, c, (col[r] - mu) / sd);
        }
    }
    (out, means, sds)
}

/// Aligns one feature matrix (one graph, or the stacked nodes of a graph
/// collection that shares a feature space).
pub fn align(x: &Matrix, spec: &AlignSpec) -> Result<AlignedFeatures> {
    spec.validate()?;
    let (n, d_in) = x.shape();
    if n == 0 {
        return Err(GiltError::InvalidSpec("cannot align an empty feature matrix".into()));
    }
    if !x.is_finite() {
        return Err(GiltError::NonFinite("features passed to align".into()));
    }
    let width = spec.output_dim();
    let k = width.min(d_in).min(n);
    let method = if n.saturating_mul(d_in) > spec.incremental_threshold {
        PcaMethod::Incremental
    } else {
        PcaMethod::Exact
    };
    let pca = fit_pca(x, k, method)?;
    let mut projected = pca.transform(x)?;
    for c in pca.degenerate_components() {
        for r in 0..n {
            projected.set(r, c, 0.0);
        }
    }
    let mut unscaled = Matrix::zeros(n, width);
    for r in 0..n {
        unscaled.row_mut(r)[..k].copy_from_slice(projected.row(r));
    }
    let (matrix, column_mean, column_sd) = standard_scale(&unscaled);
    let zero_columns = (0..width).filter(|&c| column_sd[c] <= CONSTANT_SD).collect();
    Ok(AlignedFeatures {
        matrix,
        unscaled,
        degenerate: pca.degenerate,
        pca,
        column_mean,
        column_sd,
        zero_columns,
        mode: spec.mode,
    })
}
