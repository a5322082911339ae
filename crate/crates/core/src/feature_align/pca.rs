//! Principal component analysis, exact and streaming.
//!
//! Exact PCA eigendecomposes the covariance (or the Gram matrix when there
//! are fewer rows than columns). The incremental variant streams row
//! batches into a running mean/scatter accumulator and tracks the leading
//! subspace with warm-started block power iteration, re-orthonormalizing
//! after every multiply; a Rayleigh–Ritz step orders the final basis.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{GiltError, Result};
use crate::numerics::{pairwise_sum, Matrix};

/// Components whose variance is below this fraction of the total are
/// treated as zero-variance directions.
pub const DEGENERATE_RATIO: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PcaMethod {
    Exact,
    Incremental,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `k × d_in`; row `i` is the `i`-th principal direction.
    pub components: Matrix,
    pub explained_variance: Vec<f64>,
    pub total_variance: f64,
    pub method: PcaMethod,
    /// Set when some kept component carries (numerically) zero variance.
    pub degenerate: bool,
}

impl PcaModel {
    pub fn n_components(&self) -> usize {
        self.components.rows()
    }

    pub fn explained_variance_ratio(&self) -> Vec<f64> {
        if self.total_variance <= 0.0 {
            return vec![0.0; self.explained_variance.len()];
        }
        self.explained_variance.iter().map(|v| v / self.total_variance).collect()
    }

    /// Projects centred rows of `x` onto the components (`n × k`).
    pub fn transform(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.mean.len() {
            return Err(GiltError::Shape(format!(
                "PCA fitted on {} columns, got {}",
                self.mean.len(),
                x.cols()
            )));
        }
        let mut centered = x.clone();
        for r in 0..centered.rows() {
            for (v, m) in centered.row_mut(r).iter_mut().zip(&self.mean) {
                *v -= m;
            }
        }
        Ok(centered.matmul_nt(&self.components))
    }

    /// Indices of components with zero explained variance.
    pub fn degenerate_components(&self) -> Vec<usize> {
        let floor = DEGENERATE_RATIO * self.total_variance.max(f64::MIN_POSITIVE);
        self.explained_variance
            .iter()
            .enumerate()
            .filter(|(_, &v)| v <= floor)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Flips each row so that its largest-magnitude entry is positive.
fn fix_signs(components: &mut Matrix) {
    for r in 0..components.rows() {
        let row = components.row_mut(r);
        let (mut best, mut best_abs) = (0.0, -1.0);
        for &v in row.iter() {
            if v.abs() > best_abs {
                best_abs = v.abs();
                best = v;
            }
        }
        if best < 0.0 {
            row.iter_mut().for_each(|v| *v = -*v);
        }
    }
}

fn column_means(x: &Matrix) -> Vec<f64> {
    x.column_means().into_vec()
}

fn centered(x: &Matrix, mean: &[f64]) -> Matrix {
    let mut c = x.clone();
    for r in 0..c.rows() {
        for (v, m) in c.row_mut(r).iter_mut().zip(mean) {
            *v -= m;
        }
    }
    c
}

fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

/// Eigenpairs of a symmetric matrix sorted by non-increasing eigenvalue.
fn sorted_eigen(sym: &Matrix) -> (Vec<f64>, Matrix) {
    let eig = SymmetricEigen::new(to_na(sym));
    let n = sym.rows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vecs = Matrix::zeros(n, n);
    for (row, &i) in order.iter().enumerate() {
        for c in 0..n {
            vecs.set(row, c, eig.eigenvectors[(c, i)]);
        }
    }
    (values, vecs)
}

/// Gram–Schmidt over the rows of `basis`, completing with standard basis
/// vectors wherever a row is (numerically) dependent on earlier ones.
fn orthonormalize_rows(basis: &mut Matrix) {
    let (k, dim) = basis.shape();
    let mut next_axis = 0;
    for i in 0..k {
        for _attempt in 0..=dim {
            for j in 0..i {
                let dot: f64 = (0..dim).map(|c| basis.get(i, c) * basis.get(j, c)).sum();
                for c in 0..dim {
                    let v = basis.get(i, c) - dot * basis.get(j, c);
                    basis.set(i, c, v);
                }
            }
            let norm = basis.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-10 {
                basis.row_mut(i).iter_mut().for_each(|x| *x /= norm);
                break;
            }
            let row = basis.row_mut(i);
            row.iter_mut().for_each(|x| *x = 0.0);
            row[next_axis % dim] = 1.0;
            next_axis += 1;
        }
    }
}

fn exact(x: &Matrix, k: usize) -> PcaModel {
    let (n, d) = x.shape();
    let mean = column_means(x);
    let xc = centered(x, &mean);
    let (values, mut comps) = if d <= n {
        let cov = xc.matmul_tn(&xc).scale(1.0 / n as f64);
        let (vals, vecs) = sorted_eigen(&cov);
        (vals, vecs)
    } else {
        // Gram route: eigenvectors u of XcXcᵀ/n map to v = Xcᵀu / ‖Xcᵀu‖.
        let gram = xc.matmul_nt(&xc).scale(1.0 / n as f64);
        let (vals, u) = sorted_eigen(&gram);
        let v = u.matmul(&xc);
        let mut vals_full = vals;
        vals_full.resize(d.max(n), 0.0);
        (vals_full, v)
    };
    let mut components = Matrix::zeros(k, d);
    for i in 0..k.min(comps.rows()) {
        components.row_mut(i).copy_from_slice(comps.row(i));
    }
    comps = components;
    orthonormalize_rows(&mut comps);
    fix_signs(&mut comps);
    let total = xc.as_slice().iter().map(|v| v * v).sum::<f64>() / n as f64;
    finish(mean, comps, values.into_iter().take(k).map(|v| v.max(0.0)).collect(), total, PcaMethod::Exact)
}

fn finish(mean: Vec<f64>, components: Matrix, variance: Vec<f64>, total: f64, method: PcaMethod) -> PcaModel {
    let mut model = PcaModel {
        mean,
        components,
        explained_variance: variance,
        total_variance: total,
        method,
        degenerate: false,
    };
    model.degenerate = total <= 0.0 || !model.degenerate_components().is_empty();
    model
}

/// Running mean and scatter matrix, merged batch by batch.
struct ScatterAccumulator {
    count: usize,
    mean: Vec<f64>,
    scatter: Matrix,
}

impl ScatterAccumulator {
    fn new(dim: usize) -> Self {
        ScatterAccumulator {
            count: 0,
            mean: vec![0.0; dim],
            scatter: Matrix::zeros(dim, dim),
        }
    }

    fn merge_batch(&mut self, batch: &Matrix) {
        let nb = batch.rows();
        if nb == 0 {
            return;
        }
        let bmean = column_means(batch);
        let bc = centered(batch, &bmean);
        let bscatter = bc.matmul_tn(&bc);
        let na = self.count as f64;
        let nbf = nb as f64;
        let total = na + nbf;
        let delta: Vec<f64> = bmean.iter().zip(&self.mean).map(|(b, a)| b - a).collect();
        let w = na * nbf / total;
        let d = self.mean.len();
        for i in 0..d {
            for j in 0..d {
                let v = self.scatter.get(i, j) + bscatter.get(i, j) + w * delta[i] * delta[j];
                self.scatter.set(i, j, v);
            }
        }
        for (m, dl) in self.mean.iter_mut().zip(&delta) {
            *m += dl * nbf / total;
        }
        self.count += nb;
    }

    fn covariance(&self) -> Matrix {
        self.scatter.scale(1.0 / self.count.max(1) as f64)
    }
}

/// One block power step: `V ← orth(V·C)` on row-stacked directions.
fn power_step(basis: &Matrix, cov: &Matrix) -> Matrix {
    let mut next = basis.matmul(cov);
    orthonormalize_rows(&mut next);
    next
}

/// Largest absolute change between two row-orthonormal bases, compared as
/// projectors onto their spans.
fn subspace_change(a: &Matrix, b: &Matrix) -> f64 {
    let pa = a.matmul_tn(a);
    let pb = b.matmul_tn(b);
    pa.max_abs_diff(&pb)
}

const INCREMENTAL_BATCH_ROWS: usize = 256;
const WARM_ITERS_PER_BATCH: usize = 2;
const FINAL_MAX_ITERS: usize = 5000;
const FINAL_TOL: f64 = 1e-13;

fn incremental(x: &Matrix, k: usize) -> PcaModel {
    let (n, d) = x.shape();
    let mut acc = ScatterAccumulator::new(d);
    let mut rng = ChaCha8Rng::seed_from_u64(0x9ca);
    let init: Vec<f64> = (0..k * d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut basis = Matrix::from_vec(k, d, init).unwrap();
    orthonormalize_rows(&mut basis);

    let mut start = 0;
    while start < n {
        let end = (start + INCREMENTAL_BATCH_ROWS).min(n);
        let idx: Vec<usize> = (start..end).collect();
        acc.merge_batch(&x.select_rows(&idx));
        let cov = acc.covariance();
        for _ in 0..WARM_ITERS_PER_BATCH {
            basis = power_step(&basis, &cov);
        }
        start = end;
    }
    let cov = acc.covariance();
    for _ in 0..FINAL_MAX_ITERS {
        let next = power_step(&basis, &cov);
        let change = subspace_change(&basis, &next);
        basis = next;
        if change < FINAL_TOL {
            break;
        }
    }
    // Rayleigh–Ritz: rotate within the span so components are ordered.
    let small = basis.matmul(&cov).matmul_nt(&basis);
    let (vals, rot) = sorted_eigen(&small);
    let mut comps = rot.matmul(&basis);
    orthonormalize_rows(&mut comps);
    fix_signs(&mut comps);
    let total: f64 = (0..d).map(|i| cov.get(i, i)).sum();
    let variance = vals.into_iter().map(|v| v.max(0.0)).collect();
    finish(acc.mean, comps, variance, total, PcaMethod::Incremental)
}

/// Fits the top `target_dim` principal directions of the column-centred `x`.
pub fn fit_pca(x: &Matrix, target_dim: usize, method: PcaMethod) -> Result<PcaModel> {
    let (n, d) = x.shape();
    if !x.is_finite() {
        return Err(GiltError::NonFinite("PCA input".into()));
    }
    if n == 0 || d == 0 {
        return Err(GiltError::InvalidSpec("PCA input is empty".into()));
    }
    let limit = match method {
        PcaMethod::Exact => n.min(d),
        PcaMethod::Incremental => d,
    };
    if target_dim == 0 || target_dim > limit {
        return Err(GiltError::InvalidSpec(format!(
            "target_dim {target_dim} outside 1..={limit} for a {n}x{d} input"
        )));
    }
    Ok(match method {
        PcaMethod::Exact => exact(x, target_dim),
        PcaMethod::Incremental => incremental(x, target_dim),
    })
}

/// Variance of each column of `z` (population), pairwise-summed.
pub fn column_variances(z: &Matrix) -> Vec<f64> {
    let means = column_means(z);
    (0..z.cols())
        .map(|c| {
            let sq: Vec<f64> = (0..z.rows()).map(|r| (z.get(r, c) - means[c]).powi(2)).collect();
            pairwise_sum(&sq) / z.rows() as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_one_line_has_unit_ratio() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 2.0 * i as f64 + 1.0]).collect();
        let x = Matrix::from_rows(&rows).unwrap();
        let m = fit_pca(&x, 1, PcaMethod::Exact).unwrap();
        assert!((m.explained_variance_ratio()[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn orthogonal_columns_recover_variances() {
        // Column 0 takes ±2 (variance 4), column 1 takes ±1 (variance 1),
        // arranged so the columns are orthogonal and centred.
        let x = Matrix::from_rows(&[
            vec![2.0, 1.0],
            vec![2.0, -1.0],
            vec![-2.0, 1.0],
            vec![-2.0, -1.0],
        ])
        .unwrap();
        let m = fit_pca(&x, 2, PcaMethod::Exact).unwrap();
        assert!((m.explained_variance[0] - 4.0).abs() < 1e-9);
        assert!((m.explained_variance[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn sign_convention_makes_largest_entry_positive() {
        let x = Matrix::from_rows(&[vec![-3.0, 0.1], vec![3.0, -0.1], vec![-1.0, 0.0]]).unwrap();
        let m = fit_pca(&x, 2, PcaMethod::Exact).unwrap();
        for r in 0..2 {
            let row = m.components.row(r);
            let max = row.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
            assert!(max > 0.0);
        }
    }

    #[test]
    fn constant_input_is_flagged_not_an_error() {
        let x = Matrix::filled(5, 3, 2.0);
        let m = fit_pca(&x, 2, PcaMethod::Exact).unwrap();
        assert!(m.degenerate);
        assert_eq!(m.explained_variance, vec![0.0, 0.0]);
        let gram = m.components.matmul_nt(&m.components);
        assert!(gram.max_abs_diff(&Matrix::identity(2)) < 1e-12);
    }

    #[test]
    fn target_dim_too_large() {
        let x = Matrix::filled(3, 5, 1.0);
        assert!(fit_pca(&x, 4, PcaMethod::Exact).is_err());
        assert!(fit_pca(&x, 0, PcaMethod::Exact).is_err());
    }

    #[test]
    fn wide_input_uses_gram_route() {
        let rows: Vec<Vec<f64>> = (0..4).map(|i| (0..9).map(|j| ((i * 7 + j * 3) % 5) as f64).collect()).collect();
        let x = Matrix::from_rows(&rows).unwrap();
        let m = fit_pca(&x, 3, PcaMethod::Exact).unwrap();
        let gram = m.components.matmul_nt(&m.components);
        assert!(gram.max_abs_diff(&Matrix::identity(3)) < 1e-10);
        let z = m.transform(&x).unwrap();
        let v = column_variances(&z);
        for (a, b) in v.iter().zip(&m.explained_variance) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
