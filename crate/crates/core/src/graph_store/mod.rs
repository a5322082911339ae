//! Graph data model, file ingestion, splits and synthetic corpora.

mod io;
mod split;
mod synthetic;

use serde::{Deserialize, Serialize};

use crate::error::{GiltError, Result};
use crate::numerics::Matrix;

pub use io::{
    load_dataset, load_graph, load_registry, write_dataset, write_edge_list, write_graph, write_multi_graph,
    GraphFormat, RegistryEntry,
};
pub use split::{assign_graph_split, assign_split, SplitFractions};
pub use synthetic::{make_graph_classification_corpus, make_synthetic, GraphCorpusSpec, SyntheticSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskLevel {
    Node,
    Link,
    Graph,
}

impl TaskLevel {
    pub const ALL: [TaskLevel; 3] = [TaskLevel::Node, TaskLevel::Link, TaskLevel::Graph];

    pub fn name(self) -> &'static str {
        match self {
            TaskLevel::Node => "node",
            TaskLevel::Link => "link",
            TaskLevel::Graph => "graph",
        }
    }
}

impl std::str::FromStr for TaskLevel {
    type Err = GiltError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "node" => Ok(TaskLevel::Node),
            "link" => Ok(TaskLevel::Link),
            "graph" => Ok(TaskLevel::Graph),
            other => Err(GiltError::Parse(format!("unknown task level `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// An undirected attributed graph. Immutable once built; every constructor
/// validates the invariants below.
///
/// - edges are unique unordered pairs `(u, v)` with `u < v < node_count`
/// - features are `node_count × d_in` and finite
/// - labels, when present, have one entry per node
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    node_count: usize,
    edges: Vec<(u32, u32)>,
    features: Matrix,
    node_labels: Option<Vec<u32>>,
    graph_label: Option<u32>,
    graph_tasks: Option<Vec<Option<bool>>>,
    node_split: Option<Vec<Split>>,
    edge_split: Option<Vec<Split>>,
}

impl Graph {
    /// Canonicalizes `edges` (symmetrize, drop self-loops, dedupe) and
    /// validates features.
    pub fn new(node_count: usize, edges: &[(usize, usize)], features: Matrix) -> Result<Self> {
        if features.rows() != node_count {
            return Err(GiltError::Consistency(format!(
                "feature matrix has {} rows for {node_count} nodes",
                features.rows()
            )));
        }
        if let Some(pos) = features.as_slice().iter().position(|x| !x.is_finite()) {
            let c = features.cols().max(1);
            return Err(GiltError::NonFinite(format!(
                "feature at node {}, column {}",
                pos / c,
                pos % c
            )));
        }
        let mut canon = Vec::with_capacity(edges.len());
        for &(s, d) in edges {
            if s >= node_count || d >= node_count {
                return Err(GiltError::Consistency(format!(
                    "edge ({s},{d}) out of range for {node_count} nodes"
                )));
            }
            if s == d {
                continue;
            }
            let (a, b) = if s < d { (s, d) } else { (d, s) };
            canon.push((a as u32, b as u32));
        }
        canon.sort_unstable();
        canon.dedup();
        Ok(Graph {
            node_count,
            edges: canon,
            features,
            node_labels: None,
            graph_label: None,
            graph_tasks: None,
            node_split: None,
            edge_split: None,
        })
    }

    pub fn with_node_labels(mut self, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != self.node_count {
            return Err(GiltError::Consistency(format!(
                "{} labels for {} nodes",
                labels.len(),
                self.node_count
            )));
        }
        self.node_labels = Some(labels);
        Ok(self)
    }

    pub fn with_graph_label(mut self, label: u32) -> Self {
        self.graph_label = Some(label);
        self
    }

    /// Per-task binary targets for multi-label graph datasets; `None`
    /// entries are missing labels.
    pub fn with_graph_tasks(mut self, tasks: Vec<Option<bool>>) -> Self {
        self.graph_tasks = Some(tasks);
        self
    }

    pub fn with_node_split(mut self, split: Vec<Split>) -> Result<Self> {
        if split.len() != self.node_count {
            return Err(GiltError::Consistency("node split length".into()));
        }
        self.node_split = Some(split);
        Ok(self)
    }

    pub fn with_edge_split(mut self, split: Vec<Split>) -> Result<Self> {
        if split.len() != self.edges.len() {
            return Err(GiltError::Consistency("edge split length".into()));
        }
        self.edge_split = Some(split);
        Ok(self)
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edges(&self) -> &[(u32, u32)] {
        &self.edges
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn node_labels(&self) -> Option<&[u32]> {
        self.node_labels.as_deref()
    }

    pub fn graph_label(&self) -> Option<u32> {
        self.graph_label
    }

    pub fn graph_tasks(&self) -> Option<&[Option<bool>]> {
        self.graph_tasks.as_deref()
    }

    pub fn node_split(&self) -> Option<&[Split]> {
        self.node_split.as_deref()
    }

    pub fn edge_split(&self) -> Option<&[Split]> {
        self.edge_split.as_deref()
    }

    pub fn num_node_classes(&self) -> usize {
        self.node_labels
            .as_ref()
            .and_then(|l| l.iter().max())
            .map_or(0, |&m| m as usize + 1)
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        let key = if u < v { (u as u32, v as u32) } else { (v as u32, u as u32) };
        self.edges.binary_search(&key).is_ok()
    }

    /// Neighbor lists (both directions).
    pub fn adjacency_lists(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.node_count];
        for &(u, v) in &self.edges {
            adj[u as usize].push(v as usize);
            adj[v as usize].push(u as usize);
        }
        adj
    }

    /// Task levels a single graph supports on its own.
    pub fn supported_levels(&self) -> Vec<TaskLevel> {
        let mut out = Vec::new();
        if self.node_labels.is_some() {
            out.push(TaskLevel::Node);
        }
        if !self.edges.is_empty() {
            out.push(TaskLevel::Link);
        }
        out
    }
}

/// Graphs that share one feature space: a single graph for node/link
/// datasets, or a labeled collection for graph classification.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    graphs: Vec<Graph>,
    levels: Vec<TaskLevel>,
    graph_split: Option<Vec<Split>>,
}

impl Dataset {
    /// Builds a dataset, inferring its task levels.
    pub fn new(name: impl Into<String>, graphs: Vec<Graph>) -> Result<Self> {
        let name = name.into();
        if graphs.is_empty() {
            return Err(GiltError::Consistency(format!("dataset `{name}` has no graphs")));
        }
        let dim = graphs[0].feature_dim();
        if graphs.iter().any(|g| g.feature_dim() != dim) {
            return Err(GiltError::Consistency(format!(
                "dataset `{name}` mixes feature dimensions"
            )));
        }
        let levels = if graphs.len() == 1 {
            graphs[0].supported_levels()
        } else if graphs.iter().all(|g| g.graph_label().is_some() || g.graph_tasks().is_some()) {
            vec![TaskLevel::Graph]
        } else {
            Vec::new()
        };
        Ok(Dataset {
            name,
            graphs,
            levels,
            graph_split: None,
        })
    }

    pub fn single(name: impl Into<String>, graph: Graph) -> Result<Self> {
        Dataset::new(name, vec![graph])
    }

    pub fn with_levels(mut self, levels: Vec<TaskLevel>) -> Result<Self> {
        for l in &levels {
            if !self.levels.contains(l) {
                return Err(GiltError::Unsupported(format!(
                    "dataset `{}` does not support {} tasks",
                    self.name,
                    l.name()
                )));
            }
        }
        self.levels = levels;
        Ok(self)
    }

    pub fn with_graph_split(mut self, split: Vec<Split>) -> Result<Self> {
        if split.len() != self.graphs.len() {
            return Err(GiltError::Consistency("graph split length".into()));
        }
        self.graph_split = Some(split);
        Ok(self)
    }

    pub fn graphs(&self) -> &[Graph] {
        &self.graphs
    }

    pub fn graph(&self) -> &Graph {
        &self.graphs[0]
    }

    pub fn levels(&self) -> &[TaskLevel] {
        &self.levels
    }

    pub fn supports(&self, level: TaskLevel) -> bool {
        self.levels.contains(&level)
    }

    pub fn graph_split(&self) -> Option<&[Split]> {
        self.graph_split.as_deref()
    }

    pub fn feature_dim(&self) -> usize {
        self.graphs[0].feature_dim()
    }

    /// Replaces the single graph (node/link datasets), keeping levels.
    pub fn map_graph(&self, f: impl FnOnce(&Graph) -> Result<Graph>) -> Result<Dataset> {
        let g = f(&self.graphs[0])?;
        let mut out = self.clone();
        out.graphs[0] = g;
        Ok(out)
    }
}

/// The pre-training collection.
#[derive(Clone, Debug)]
pub struct Corpus {
    datasets: Vec<Dataset>,
}

impl Corpus {
    pub fn new(datasets: Vec<Dataset>) -> Result<Self> {
        if datasets.is_empty() {
            return Err(GiltError::Consistency("corpus is empty".into()));
        }
        if let Some(d) = datasets.iter().find(|d| d.levels().is_empty()) {
            return Err(GiltError::Consistency(format!(
                "dataset `{}` supports no task level",
                d.name
            )));
        }
        Ok(Corpus { datasets })
    }

    pub fn datasets(&self) -> &[Dataset] {
        &self.datasets
    }

    pub fn supports(&self, level: TaskLevel) -> bool {
        self.datasets.iter().any(|d| d.supports(level))
    }
}
