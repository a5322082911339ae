//! Stochastic block model graphs with Gaussian class-conditional features.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Graph};
use crate::error::{GiltError, Result};
use crate::numerics::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub nodes_per_class: usize,
    pub intra_p: f64,
    pub inter_p: f64,
    pub feature_dim: usize,
    /// Norm of each class mean vector. Means point in random directions that
    /// are mutually orthogonal when `feature_dim >= n_classes`.
    pub class_mean_separation: f64,
    pub noise_sd: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        for (name, p) in [("intra_p", self.intra_p), ("inter_p", self.inter_p)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(GiltError::InvalidSpec(format!("{name} = {p} is not a probability")));
            }
        }
        if self.n_classes == 0 || self.nodes_per_class == 0 || self.feature_dim == 0 {
            return Err(GiltError::InvalidSpec("counts must be at least 1".into()));
        }
        if !(self.noise_sd >= 0.0) || !self.class_mean_separation.is_finite() {
            return Err(GiltError::InvalidSpec("noise_sd must be >= 0 and separation finite".into()));
        }
        Ok(())
    }
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Random unit directions, mutually orthogonal while `dim` allows it, so
/// every pair of class means sits at the same distance.
fn class_directions(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(n);
    while out.len() < n {
        let mut v = random_unit(rng, dim);
        if out.len() < dim {
            for u in &out {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-6 {
                continue;
            }
            v.iter_mut().for_each(|x| *x /= norm);
        }
        out.push(v);
    }
    out
}

/// Generates an SBM graph. Nodes are ordered class by class; node `i`
/// belongs to class `i / nodes_per_class`.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<Graph> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n_classes * spec.nodes_per_class;
    let class_of = |i: usize| i / spec.nodes_per_class;

    let means: Vec<Vec<f64>> = class_directions(&mut rng, spec.n_classes, spec.feature_dim)
        .into_iter()
        .map(|u| u.into_iter().map(|x| x * spec.class_mean_separation).collect())
        .collect();

    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let p = if class_of(i) == class_of(j) { spec.intra_p } else { spec.inter_p };
            if p > 0.0 && rng.random::<f64>() < p {
                edges.push((i, j));
            }
        }
    }

    let mut feats = Matrix::zeros(n, spec.feature_dim);
    let noise = Normal::new(0.0, spec.noise_sd.max(0.0)).map_err(|e| GiltError::InvalidSpec(e.to_string()))?;
    for i in 0..n {
        let mu = &means[class_of(i)];
        for (c, x) in feats.row_mut(i).iter_mut().enumerate() {
            *x = mu[c] + if spec.noise_sd > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        }
    }
    let labels = (0..n).map(|i| class_of(i) as u32).collect();
    Graph::new(n, &edges, feats)?.with_node_labels(labels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphCorpusSpec {
    pub n_classes: usize,
    pub graphs_per_class: usize,
    pub nodes_per_graph: usize,
    pub feature_dim: usize,
    pub seed: u64,
}

/// A graph-classification collection: class `c` graphs are Erdős–Rényi with
/// density increasing in `c` and features centred on a class direction.
pub fn make_graph_classification_corpus(name: &str, spec: &GraphCorpusSpec) -> Result<Dataset> {
    if spec.n_classes < 2 || spec.graphs_per_class == 0 || spec.nodes_per_graph < 2 || spec.feature_dim == 0 {
        return Err(GiltError::InvalidSpec("graph corpus needs >=2 classes and non-empty graphs".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dirs: Vec<Vec<f64>> = (0..spec.n_classes).map(|_| random_unit(&mut rng, spec.feature_dim)).collect();
    let mut graphs = Vec::new();
    for g in 0..spec.n_classes * spec.graphs_per_class {
        let c = g % spec.n_classes;
        let p = 0.1 + 0.5 * c as f64 / spec.n_classes as f64;
        let n = spec.nodes_per_graph;
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if rng.random::<f64>() < p {
                    edges.push((i, j));
                }
            }
        }
        let mut feats = Matrix::zeros(n, spec.feature_dim);
        for i in 0..n {
            for (k, x) in feats.row_mut(i).iter_mut().enumerate() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *x = dirs[c][k] + z;
            }
        }
        graphs.push(Graph::new(n, &edges, feats)?.with_graph_label(c as u32));
    }
    Dataset::new(name, graphs)
}
