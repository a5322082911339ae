//! Reverse-mode differentiation over a linear computation record.
//!
//! Every operation appends a node holding its forward value and enough
//! context to compute its vector-Jacobian product. One tape per episode;
//! tapes are not shared across threads.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;

use super::matrix::{pairwise_sum, Matrix};
use super::sparse::SparseMatrix;

/// Norms below this are treated as exactly zero (zero-vector conventions).
pub const ZERO_NORM: f64 = 1e-12;
/// Norm clamp inside [`Tape::cosine_rows`].
pub const COS_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    MeanRows(Var),
    Sum(Var),
    Mean(Var),
    NormRows(Var),
    L2NormalizeRows(Var, Vec<f64>),
    ClampedNormalizeRows(Var, f64, Vec<f64>),
    SoftmaxRows(Var),
    LayerNormRows { x: Var, xhat: Matrix, inv_std: Vec<f64> },
    StandardizeCols { x: Var, xhat: Matrix, inv_std: Vec<f64> },
    Relu(Var),
    Dropout(Var, Vec<f64>),
    Log(Var, f64),
    PickPerRow(Var, Vec<usize>),
    SpMM(Arc<SparseMatrix>, Var),
}

struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

/// Gradients of one scalar output with respect to every node on the tape.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }
}

fn col_sums(m: &Matrix) -> Matrix {
    let mut out = m.column_means();
    let r = m.rows() as f64;
    for x in out.as_mut_slice() {
        *x *= r;
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf)
    }

    /// Registers a named trainable leaf. Repeated calls with the same name
    /// return the same variable, so shared weights accumulate one gradient.
    pub fn param(&mut self, name: &str, m: &Matrix) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.push(m.clone(), Op::Leaf);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn param_vars(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_nt(self.value(b));
        self.push(v, Op::MatMulNT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape");
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape");
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape");
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    /// `a + 1·b` where `b` is a `1 × cols` row broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(b), (1, c), "add_row shape");
        let mut v = self.value(a).clone();
        let bias = self.value(b).as_slice().to_vec();
        for i in 0..r {
            for (x, &y) in v.row_mut(i).iter_mut().zip(&bias) {
                *x += y;
            }
        }
        self.push(v, Op::AddRow(a, b))
    }

    /// `a ⊙ 1·b` with `b` a broadcast row.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(b), (1, c), "mul_row shape");
        let mut v = self.value(a).clone();
        let w = self.value(b).as_slice().to_vec();
        for i in 0..r {
            for (x, &y) in v.row_mut(i).iter_mut().zip(&w) {
                *x *= y;
            }
        }
        self.push(v, Op::MulRow(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Matrix::hconcat(&mats);
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        assert!(start + len <= self.shape(a).1, "slice_cols range");
        let v = self.value(a).slice_cols(start, len);
        self.push(v, Op::SliceCols(a, start))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Matrix::vconcat(&mats);
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let v = self.value(a).select_rows(idx);
        self.push(v, Op::GatherRows(a, idx.to_vec()))
    }

    /// Mean over rows, giving `1 × cols`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).column_means();
        self.push(v, Op::MeanRows(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Matrix::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let v = Matrix::scalar(m.sum() / m.len() as f64);
        self.push(v, Op::Mean(a))
    }

    /// Euclidean norm of every row, giving `rows × 1`.
    pub fn norm_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let norms: Vec<f64> = (0..m.rows())
            .map(|r| pairwise_sum(&m.row(r).iter().map(|x| x * x).collect::<Vec<_>>()).sqrt())
            .collect();
        let v = Matrix::from_vec(norms.len(), 1, norms).unwrap();
        self.push(v, Op::NormRows(a))
    }

    /// Rows scaled to unit length; rows with norm below [`ZERO_NORM`] map to zero.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut v = m.clone();
        let mut norms = Vec::with_capacity(m.rows());
        for r in 0..m.rows() {
            let n = pairwise_sum(&m.row(r).iter().map(|x| x * x).collect::<Vec<_>>()).sqrt();
            let row = v.row_mut(r);
            if n < ZERO_NORM {
                row.iter_mut().for_each(|x| *x = 0.0);
            } else {
                row.iter_mut().for_each(|x| *x /= n);
            }
            norms.push(n);
        }
        self.push(v, Op::L2NormalizeRows(a, norms))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for r in 0..v.rows() {
            softmax_in_place(v.row_mut(r));
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    /// Per-row standardization over columns: `(x − μ)/√(σ² + eps)`, no affine.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let m = self.value(a);
        let (rows, cols) = m.shape();
        let mut xhat = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = m.row(r);
            let mu = pairwise_sum(row) / cols as f64;
            let centered: Vec<f64> = row.iter().map(|x| x - mu).collect();
            let var = pairwise_sum(&centered.iter().map(|x| x * x).collect::<Vec<_>>()) / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            for (o, c) in xhat.row_mut(r).iter_mut().zip(&centered) {
                *o = c * is;
            }
            inv_std.push(is);
        }
        self.push(xhat.clone(), Op::LayerNormRows { x: a, xhat, inv_std })
    }

    /// Column-wise standard scaling over rows (population sd). Columns whose
    /// sd is below `tol` map to all-zero and pass no gradient.
    pub fn standardize_cols(&mut self, a: Var, tol: f64) -> Var {
        let m = self.value(a);
        let (rows, cols) = m.shape();
        let mut xhat = Matrix::zeros(rows, cols);
        let mut inv_std = vec![0.0; cols];
        for c in 0..cols {
            let col = m.column(c);
            let mu = pairwise_sum(&col) / rows as f64;
            let centered: Vec<f64> = col.iter().map(|x| x - mu).collect();
            let var = pairwise_sum(&centered.iter().map(|x| x * x).collect::<Vec<_>>()) / rows as f64;
            let sd = var.sqrt();
            if sd <= tol {
                continue;
            }
            inv_std[c] = 1.0 / sd;
            for r in 0..rows {
                xhat.set(r, c, centered[r] / sd);
            }
        }
        self.push(xhat.clone(), Op::StandardizeCols { x: a, xhat, inv_std })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    /// Inverted dropout: kept entries are scaled by `1/(1−p)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return a;
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(a).len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let src = self.value(a);
        let data: Vec<f64> = src.as_slice().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let v = Matrix::from_vec(src.rows(), src.cols(), data).unwrap();
        self.push(v, Op::Dropout(a, mask))
    }

    /// `ln(max(x, floor))`.
    pub fn log_clamped(&mut self, a: Var, floor: f64) -> Var {
        let v = self.value(a).map(|x| x.max(floor).ln());
        self.push(v, Op::Log(a, floor))
    }

    /// Picks column `idx[r]` of every row `r`, giving `rows × 1`.
    pub fn pick_per_row(&mut self, a: Var, idx: &[usize]) -> Var {
        let m = self.value(a);
        assert_eq!(m.rows(), idx.len(), "pick_per_row length");
        let vals: Vec<f64> = idx.iter().enumerate().map(|(r, &c)| m.get(r, c)).collect();
        let v = Matrix::from_vec(idx.len(), 1, vals).unwrap();
        self.push(v, Op::PickPerRow(a, idx.to_vec()))
    }

    /// Sparse-constant times dense-variable product.
    pub fn spmm(&mut self, s: &Arc<SparseMatrix>, a: Var) -> Var {
        let v = s.matmul(self.value(a));
        self.push(v, Op::SpMM(Arc::clone(s), a))
    }

    /// Row-wise cosine similarities between the rows of `a` and `b`
    /// (`rows_a × rows_b`). Cosine with a zero vector is 0.
    /// Rows divided by `max(‖row‖, delta)`. Below `delta` the map is linear,
    /// so a zero row stays zero but still passes gradient.
    pub fn normalize_rows_clamped(&mut self, a: Var, delta: f64) -> Var {
        let m = self.value(a);
        let mut v = m.clone();
        let mut norms = Vec::with_capacity(m.rows());
        for r in 0..m.rows() {
            let n = pairwise_sum(&m.row(r).iter().map(|x| x * x).collect::<Vec<_>>()).sqrt();
            let d = n.max(delta);
            v.row_mut(r).iter_mut().for_each(|x| *x /= d);
            norms.push(n);
        }
        self.push(v, Op::ClampedNormalizeRows(a, delta, norms))
    }

    /// Row-pair cosines `a_i·b_j / (max(‖a_i‖, δ)·max(‖b_j‖, δ))` with
    /// δ = [`COS_EPS`]; a zero row scores 0 against everything.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Var {
        let an = self.normalize_rows_clamped(a, COS_EPS);
        let bn = self.normalize_rows_clamped(b, COS_EPS);
        self.matmul_nt(an, bn)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.shape(out), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Matrix::scalar(1.0));

        fn acc(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=out.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    acc(&mut grads, *a, g.matmul_nt(self.value(*b)));
                    acc(&mut grads, *b, self.value(*a).matmul_tn(&g));
                }
                Op::MatMulNT(a, b) => {
                    acc(&mut grads, *a, g.matmul(self.value(*b)));
                    acc(&mut grads, *b, g.matmul_tn(self.value(*a)));
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.scale(-1.0));
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                    acc(&mut grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
                Op::AddRow(a, b) => {
                    acc(&mut grads, *b, col_sums(&g));
                    acc(&mut grads, *a, g.clone());
                }
                Op::MulRow(a, b) => {
                    let w = self.value(*b).as_slice();
                    let mut ga = g.clone();
                    for r in 0..ga.rows() {
                        for (x, &y) in ga.row_mut(r).iter_mut().zip(w) {
                            *x *= y;
                        }
                    }
                    let gb = col_sums(&g.zip_map(self.value(*a), |x, y| x * y));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(a, s) => acc(&mut grads, *a, g.scale(*s)),
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let c = self.shape(*p).1;
                        acc(&mut grads, *p, g.slice_cols(off, c));
                        off += c;
                    }
                }
                Op::SliceCols(a, start) => {
                    let (r, c) = self.shape(*a);
                    let mut ga = Matrix::zeros(r, c);
                    let w = g.cols();
                    for row in 0..r {
                        ga.row_mut(row)[*start..*start + w].copy_from_slice(g.row(row));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let r = self.shape(*p).0;
                        let idx: Vec<usize> = (off..off + r).collect();
                        acc(&mut grads, *p, g.select_rows(&idx));
                        off += r;
                    }
                }
                Op::GatherRows(a, idx) => {
                    let (r, c) = self.shape(*a);
                    let mut ga = Matrix::zeros(r, c);
                    for (o, &src) in idx.iter().enumerate() {
                        for (x, &y) in ga.row_mut(src).iter_mut().zip(g.row(o)) {
                            *x += y;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::MeanRows(a) => {
                    let (r, c) = self.shape(*a);
                    let mut ga = Matrix::zeros(r, c);
                    for row in 0..r {
                        for (x, &y) in ga.row_mut(row).iter_mut().zip(g.as_slice()) {
                            *x = y / r as f64;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let (r, c) = self.shape(*a);
                    acc(&mut grads, *a, Matrix::filled(r, c, g.scalar_value()));
                }
                Op::Mean(a) => {
                    let (r, c) = self.shape(*a);
                    let n = (r * c) as f64;
                    acc(&mut grads, *a, Matrix::filled(r, c, g.scalar_value() / n));
                }
                Op::NormRows(a) => {
                    let x = self.value(*a);
                    let norms = &node.value;
                    let mut ga = Matrix::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        let n = norms.get(r, 0);
                        if n < ZERO_NORM {
                            continue;
                        }
                        let gr = g.get(r, 0);
                        for (o, &xv) in ga.row_mut(r).iter_mut().zip(x.row(r)) {
                            *o = gr * xv / n;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::L2NormalizeRows(a, norms) => {
                    let y = &node.value;
                    let mut ga = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let n = norms[r];
                        if n < ZERO_NORM {
                            continue;
                        }
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((o, &yv), &gv) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o = (gv - yv * dot) / n;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::ClampedNormalizeRows(a, delta, norms) => {
                    let y = &node.value;
                    let mut ga = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let n = norms[r];
                        let gr = g.row(r);
                        if n < *delta {
                            for (o, &gv) in ga.row_mut(r).iter_mut().zip(gr) {
                                *o = gv / delta;
                            }
                            continue;
                        }
                        let yr = y.row(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((o, &yv), &gv) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o = (gv - yv * dot) / n;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((o, &yv), &gv) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o = yv * (gv - dot);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNormRows { x, xhat, inv_std } => {
                    let (rows, cols) = xhat.shape();
                    let n = cols as f64;
                    let mut ga = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        let gr = g.row(r);
                        let xr = xhat.row(r);
                        let mg = gr.iter().sum::<f64>() / n;
                        let mgx = gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / n;
                        for ((o, &gv), &xv) in ga.row_mut(r).iter_mut().zip(gr).zip(xr) {
                            *o = inv_std[r] * (gv - mg - xv * mgx);
                        }
                    }
                    acc(&mut grads, *x, ga);
                }
                Op::StandardizeCols { x, xhat, inv_std } => {
                    let (rows, cols) = xhat.shape();
                    let n = rows as f64;
                    let mut ga = Matrix::zeros(rows, cols);
                    for c in 0..cols {
                        if inv_std[c] == 0.0 {
                            continue;
                        }
                        let mut mg = 0.0;
                        let mut mgx = 0.0;
                        for r in 0..rows {
                            mg += g.get(r, c);
                            mgx += g.get(r, c) * xhat.get(r, c);
                        }
                        mg /= n;
                        mgx /= n;
                        for r in 0..rows {
                            let v = inv_std[c] * (g.get(r, c) - mg - xhat.get(r, c) * mgx);
                            ga.set(r, c, v);
                        }
                    }
                    acc(&mut grads, *x, ga);
                }
                Op::Relu(a) => {
                    let ga = g.zip_map(self.value(*a), |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                    acc(&mut grads, *a, ga);
                }
                Op::Dropout(a, mask) => {
                    let data: Vec<f64> = g.as_slice().iter().zip(mask).map(|(x, m)| x * m).collect();
                    acc(&mut grads, *a, Matrix::from_vec(g.rows(), g.cols(), data).unwrap());
                }
                Op::Log(a, floor) => {
                    let ga = g.zip_map(self.value(*a), |gv, xv| if xv > *floor { gv / xv } else { 0.0 });
                    acc(&mut grads, *a, ga);
                }
                Op::PickPerRow(a, idx) => {
                    let (r, c) = self.shape(*a);
                    let mut ga = Matrix::zeros(r, c);
                    for (row, &col) in idx.iter().enumerate() {
                        ga.set(row, col, g.get(row, 0));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SpMM(s, a) => acc(&mut grads, *a, s.transpose_matmul(&g)),
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    /// Gradients of the named parameters; parameters the output does not
    /// depend on get an explicit zero matrix.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Matrix> {
        self.params
            .iter()
            .map(|(name, &v)| {
                let g = grads.wrt(v).cloned().unwrap_or_else(|| {
                    let (r, c) = self.shape(v);
                    Matrix::zeros(r, c)
                });
                (name.clone(), g)
            })
            .collect()
    }
}

/// Numerically stable in-place softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    if row.is_empty() {
        return;
    }
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for x in row.iter_mut() {
        *x = (*x - max).exp();
    }
    let s = pairwise_sum(row);
    for x in row.iter_mut() {
        *x /= s;
    }
}
