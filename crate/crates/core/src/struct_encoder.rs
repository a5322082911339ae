//! Parameter-light structural encoder: repeated symmetric-normalized
//! aggregation, each round followed by its own affine LayerNorm,
//! `H ← LayerNorm_l(Ã·H)`. No weights, no nonlinearity, no residuals.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{GiltError, Result};
use crate::graph_store::Graph;
use crate::numerics::{Matrix, ParamStore, SparseMatrix, Tape, Var};

/// Encoder LayerNorm epsilon. Small enough that normalized rows have unit
/// variance to within 1e-6 for any realistic input row variance.
pub const ENCODER_LN_EPS: f64 = 1e-12;

/// `Ã = D^{-1/2}(A + I)D^{-1/2}`, symmetric, stored sparse.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedAdjacency {
    matrix: Arc<SparseMatrix>,
}

impl NormalizedAdjacency {
    /// Builds from an undirected edge list (each pair once, no self-loops).
    pub fn from_edges(n: usize, edges: impl Iterator<Item = (usize, usize)> + Clone) -> Self {
        let mut deg = vec![1usize; n];
        for (u, v) in edges.clone() {
            deg[u] += 1;
            deg[v] += 1;
        }
        let mut trip = Vec::with_capacity(n);
        for (i, &d) in deg.iter().enumerate() {
            trip.push((i, i, 1.0 / d as f64));
        }
        for (u, v) in edges {
            let w = 1.0 / ((deg[u] * deg[v]) as f64).sqrt();
            trip.push((u, v, w));
            trip.push((v, u, w));
        }
        NormalizedAdjacency {
            matrix: Arc::new(SparseMatrix::from_triplets(n, n, &trip)),
        }
    }

    pub fn sparse(&self) -> &Arc<SparseMatrix> {
        &self.matrix
    }

    pub fn node_count(&self) -> usize {
        self.matrix.rows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix.get(i, j)
    }

    pub fn to_dense(&self) -> Matrix {
        self.matrix.to_dense()
    }
}

pub fn normalize_adjacency(g: &Graph) -> NormalizedAdjacency {
    NormalizedAdjacency::from_edges(
        g.node_count(),
        g.edges().iter().map(|&(u, v)| (u as usize, v as usize)),
    )
}

/// Like [`normalize_adjacency`] but keeps only edges with `keep[e] == true`.
pub fn normalize_adjacency_masked(g: &Graph, keep: &[bool]) -> NormalizedAdjacency {
    NormalizedAdjacency::from_edges(
        g.node_count(),
        g.edges()
            .iter()
            .zip(keep)
            .filter(|(_, &k)| k)
            .map(|(&(u, v), _)| (u as usize, v as usize)),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderVariant {
    Linear,
    /// Ablation: a learnable `d×d` weight (identity-initialized) and ReLU
    /// before each LayerNorm.
    Nonlinear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub variant: EncoderVariant,
}

pub fn gamma_name(l: usize) -> String {
    format!("enc.{l}.gamma")
}

pub fn beta_name(l: usize) -> String {
    format!("enc.{l}.beta")
}

pub fn weight_name(l: usize) -> String {
    format!("enc.{l}.w")
}

/// Adds the encoder's parameters: per layer an affine pair `(γ = 1, β = 0)`
/// of width `d`, plus an identity weight for the nonlinear ablation.
pub fn init_params(store: &mut ParamStore, d: usize, cfg: &EncoderConfig) {
    for l in 0..cfg.layers {
        store.insert(gamma_name(l), Matrix::filled(1, d, 1.0));
        store.insert(beta_name(l), Matrix::zeros(1, d));
        if cfg.variant == EncoderVariant::Nonlinear {
            store.insert(weight_name(l), Matrix::identity(d));
        }
    }
}

/// Records the encoder on `tape`. `layers` may be below `cfg.layers` to
/// evaluate a truncated encoder.
pub fn encode_on_tape(
    tape: &mut Tape,
    x: Var,
    adj: &NormalizedAdjacency,
    store: &ParamStore,
    cfg: &EncoderConfig,
    layers: usize,
) -> Result<Var> {
    let (n, d) = tape.shape(x);
    if n != adj.node_count() {
        return Err(GiltError::Shape(format!(
            "{n} feature rows for a {}-node adjacency",
            adj.node_count()
        )));
    }
    let mut h = x;
    for l in 0..layers.min(cfg.layers) {
        let gamma = store.get(&gamma_name(l))?;
        if gamma.cols() != d {
            return Err(GiltError::Shape(format!("encoder width {} vs features {d}", gamma.cols())));
        }
        let mut agg = tape.spmm(adj.sparse(), h);
        if cfg.variant == EncoderVariant::Nonlinear {
            let w = tape.param(&weight_name(l), store.get(&weight_name(l))?);
            agg = tape.matmul(agg, w);
            agg = tape.relu(agg);
        }
        let normed = tape.layer_norm_rows(agg, ENCODER_LN_EPS);
        let g = tape.param(&gamma_name(l), gamma);
        let b = tape.param(&beta_name(l), store.get(&beta_name(l))?);
        let scaled = tape.mul_row(normed, g);
        h = tape.add_row(scaled, b);
    }
    Ok(h)
}

/// Node embedding matrix `H`, `n × d`.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeEmbeddings(pub Matrix);

/// Runs the encoder on plain matrices. With zero layers the input is
/// returned unchanged.
pub fn encode(
    features: &Matrix,
    adj: &NormalizedAdjacency,
    store: &ParamStore,
    cfg: &EncoderConfig,
) -> Result<NodeEmbeddings> {
    let mut tape = Tape::new();
    let x = tape.constant(features.clone());
    let h = encode_on_tape(&mut tape, x, adj, store, cfg, cfg.layers)?;
    Ok(NodeEmbeddings(tape.value(h).clone()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path3() -> Graph {
        Graph::new(3, &[(0, 1), (1, 2)], Matrix::zeros(3, 2)).unwrap()
    }

    fn params(d: usize, layers: usize) -> (ParamStore, EncoderConfig) {
        let cfg = EncoderConfig { layers, variant: EncoderVariant::Linear };
        let mut s = ParamStore::new();
        init_params(&mut s, d, &cfg);
        (s, cfg)
    }

    #[test]
    fn single_edge_is_all_halves() {
        let g = Graph::new(2, &[(0, 1)], Matrix::zeros(2, 1)).unwrap();
        let a = normalize_adjacency(&g).to_dense();
        assert_eq!(a.as_slice(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn isolated_node_is_one() {
        let g = Graph::new(1, &[], Matrix::zeros(1, 1)).unwrap();
        assert_eq!(normalize_adjacency(&g).to_dense().as_slice(), &[1.0]);
    }

    #[test]
    fn path_entry_by_hand() {
        let a = normalize_adjacency(&path3());
        assert!((a.get(0, 1) - 1.0 / 6f64.sqrt()).abs() < 1e-12);
        assert!((a.get(1, 1) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(a.get(0, 2), 0.0);
    }

    #[test]
    fn zero_layers_is_identity() {
        let (s, cfg) = params(2, 0);
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 7.0]]).unwrap();
        let h = encode(&x, &normalize_adjacency(&path3()), &s, &cfg).unwrap();
        assert_eq!(h.0, x);
    }

    #[test]
    fn complete_graph_identical_rows_stay_identical_and_standardized() {
        let n = 5;
        let edges: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
        let row = vec![0.3, -1.0, 2.0, 0.7];
        let x = Matrix::from_rows(&vec![row; n]).unwrap();
        let g = Graph::new(n, &edges, x.clone()).unwrap();
        let (s, cfg) = params(4, 1);
        let h = encode(&x, &normalize_adjacency(&g), &s, &cfg).unwrap().0;
        for r in 0..n {
            for c in 0..4 {
                assert!((h.get(r, c) - h.get(0, c)).abs() < 1e-12);
            }
            let mean = h.row(r).iter().sum::<f64>() / 4.0;
            let var = h.row(r).iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-7 && (var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn path_layer_matches_dense_oracle() {
        let x = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.5, 0.25]]).unwrap();
        let (s, cfg) = params(2, 1);
        let h = encode(&x, &normalize_adjacency(&path3()), &s, &cfg).unwrap().0;
        // Dense Ã by hand from degrees (1,2,1) plus self-loops.
        let r6 = 1.0 / 6f64.sqrt();
        let a = [[0.5, r6, 0.0], [r6, 1.0 / 3.0, r6], [0.0, r6, 0.5]];
        for i in 0..3 {
            let agg: Vec<f64> = (0..2).map(|c| (0..3).map(|j| a[i][j] * x.get(j, c)).sum()).collect();
            let mu = (agg[0] + agg[1]) / 2.0;
            let var = ((agg[0] - mu).powi(2) + (agg[1] - mu).powi(2)) / 2.0;
            for c in 0..2 {
                let expect = (agg[c] - mu) / (var + ENCODER_LN_EPS).sqrt();
                assert!((h.get(i, c) - expect).abs() < 1e-12, "{i},{c}");
            }
        }
    }

    #[test]
    fn no_residual_between_layers() {
        let x = Matrix::from_rows(&[vec![1.0, 0.0, 2.0], vec![0.0, 1.0, -1.0], vec![0.5, 0.25, 0.0]]).unwrap();
        let adj = normalize_adjacency(&path3());
        let (s, cfg) = params(3, 2);
        let plain = encode(&x, &adj, &s, &cfg).unwrap().0;
        // Residual variant: H ← LN(ÃH) + H.
        let one = EncoderConfig { layers: 1, ..cfg.clone() };
        let h1 = encode(&x, &adj, &s, &one).unwrap().0;
        let h1r = h1.zip_map(&x, |a, b| a + b);
        let h2r = encode(&h1r, &adj, &s, &one).unwrap().0.zip_map(&h1r, |a, b| a + b);
        assert!(plain.max_abs_diff(&h2r) > 1e-3);
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let (s, cfg) = params(4, 1);
        let x = Matrix::zeros(3, 2);
        assert!(matches!(encode(&x, &normalize_adjacency(&path3()), &s, &cfg), Err(GiltError::Shape(_))));
    }
}
