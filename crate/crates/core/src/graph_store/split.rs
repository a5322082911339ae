use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, Graph, Split, TaskLevel};
use crate::error::{GiltError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl SplitFractions {
    pub fn new(train: f64, valid: f64, test: f64) -> Result<Self> {
        let f = SplitFractions { train, valid, test };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.valid, self.test];
        if parts.iter().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(GiltError::InvalidSpec("split fractions must lie in [0,1]".into()));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(GiltError::InvalidSpec(format!(
                "split fractions sum to {}, expected 1",
                parts.iter().sum::<f64>()
            )));
        }
        Ok(())
    }

    /// Seeded random partition of `n` items; sizes are rounded train/valid
    /// counts with the remainder going to test.
    fn partition(&self, n: usize, seed: u64) -> Vec<Split> {
        let n_train = ((self.train * n as f64).round() as usize).min(n);
        let n_valid = ((self.valid * n as f64).round() as usize).min(n - n_train);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut out = vec![Split::Test; n];
        for (rank, &i) in order.iter().enumerate() {
            out[i] = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_valid {
                Split::Valid
            } else {
                Split::Test
            };
        }
        out
    }
}

/// Partitions nodes (node level) or edges (link level) of one graph.
///
/// Edges are stored once as unordered pairs, so both directions of an edge
/// always land in the same partition.
pub fn assign_split(g: &Graph, fractions: SplitFractions, level: TaskLevel, seed: u64) -> Result<Graph> {
    fractions.validate()?;
    match level {
        TaskLevel::Node => {
            if g.node_labels().is_none() {
                return Err(GiltError::Unsupported("node split requested but graph has no node labels".into()));
            }
            g.clone().with_node_split(fractions.partition(g.node_count(), seed))
        }
        TaskLevel::Link => {
            if g.edge_count() == 0 {
                return Err(GiltError::Unsupported("link split requested but graph has no edges".into()));
            }
            g.clone().with_edge_split(fractions.partition(g.edge_count(), seed))
        }
        TaskLevel::Graph => Err(GiltError::Unsupported(
            "graph-level splits are assigned over a dataset, see assign_graph_split".into(),
        )),
    }
}

/// Partitions the graphs of a graph-classification dataset.
pub fn assign_graph_split(ds: &Dataset, fractions: SplitFractions, seed: u64) -> Result<Dataset> {
    fractions.validate()?;
    if !ds.supports(TaskLevel::Graph) {
        return Err(GiltError::Unsupported(format!("dataset `{}` has no graph labels", ds.name)));
    }
    ds.clone().with_graph_split(fractions.partition(ds.graphs().len(), seed))
}
