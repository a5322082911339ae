//! File formats:
//!
//! * edge list: TSV lines `src<TAB>dst`, a companion CSV feature matrix with
//!   one row per node, and an optional one-column label CSV;
//! * single-file JSON: `{"nodes": n, "edges": [[s,d],..], "features": [[..]], "labels": [..]}`,
//!   optionally with `graph_label`, or `{"graphs": [..]}` for graph collections;
//! * a registry of `name = path` lines.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, Graph, Split, TaskLevel};
use crate::error::{GiltError, Result};
use crate::numerics::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub enum GraphFormat {
    EdgeList {
        features: PathBuf,
        labels: Option<PathBuf>,
    },
    Json,
}

impl GraphFormat {
    /// `.json` is JSON; anything else is an edge list with sibling
    /// `<stem>.features.csv` and optional `<stem>.labels.csv`.
    pub fn infer(path: &Path) -> GraphFormat {
        if path.extension().is_some_and(|e| e == "json") {
            return GraphFormat::Json;
        }
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        let labels = dir.join(format!("{stem}.labels.csv"));
        GraphFormat::EdgeList {
            features: dir.join(format!("{stem}.features.csv")),
            labels: labels.exists().then_some(labels),
        }
    }
}

/// Numbers in JSON feature arrays; strings admit `NaN`/`Inf` so that such
/// entries surface as non-finite errors rather than parse errors.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum Num {
    F(f64),
    S(String),
}

impl Num {
    fn value(&self) -> Result<f64> {
        match self {
            Num::F(x) => Ok(*x),
            Num::S(s) => s
                .trim()
                .parse::<f64>()
                .map_err(|_| GiltError::Parse(format!("feature value `{s}`"))),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct JsonGraph {
    nodes: usize,
    edges: Vec<[usize; 2]>,
    features: Vec<Vec<Num>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    graph_label: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    graph_tasks: Option<Vec<Option<bool>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    node_split: Option<Vec<Split>>,
    /// Indexed like `edges`, which must then be canonical (sorted, `u < v`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    edge_split: Option<Vec<Split>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct JsonCollection {
    graphs: Vec<JsonGraph>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    graph_split: Option<Vec<Split>>,
}

fn json_to_graph(j: JsonGraph) -> Result<Graph> {
    let cols = j.features.first().map_or(0, Vec::len);
    let mut data = Vec::with_capacity(j.nodes * cols);
    for (i, row) in j.features.iter().enumerate() {
        if row.len() != cols {
            return Err(GiltError::Consistency(format!(
                "feature row {i} has {} entries, expected {cols}",
                row.len()
            )));
        }
        for x in row {
            data.push(x.value()?);
        }
    }
    let feats = Matrix::from_vec(j.features.len(), cols, data)?;
    let edges: Vec<(usize, usize)> = j.edges.iter().map(|e| (e[0], e[1])).collect();
    let mut g = Graph::new(j.nodes, &edges, feats)?;
    if let Some(l) = j.labels {
        g = g.with_node_labels(l)?;
    }
    if let Some(l) = j.graph_label {
        g = g.with_graph_label(l);
    }
    if let Some(t) = j.graph_tasks {
        g = g.with_graph_tasks(t);
    }
    if let Some(s) = j.node_split {
        g = g.with_node_split(s)?;
    }
    if let Some(s) = j.edge_split {
        let canonical = edges.len() == g.edge_count()
            && edges.iter().zip(g.edges()).all(|(&(a, b), &(c, d))| (a, b) == (c as usize, d as usize));
        if !canonical {
            return Err(GiltError::Consistency("edge_split needs edges listed in canonical order".into()));
        }
        g = g.with_edge_split(s)?;
    }
    Ok(g)
}

fn graph_to_json(g: &Graph) -> JsonGraph {
    JsonGraph {
        nodes: g.node_count(),
        edges: g.edges().iter().map(|&(a, b)| [a as usize, b as usize]).collect(),
        features: g.features().to_rows().into_iter().map(|r| r.into_iter().map(Num::F).collect()).collect(),
        labels: g.node_labels().map(<[u32]>::to_vec),
        graph_label: g.graph_label(),
        graph_tasks: g.graph_tasks().map(<[Option<bool>]>::to_vec),
        node_split: g.node_split().map(<[Split]>::to_vec),
        edge_split: g.edge_split().map(<[Split]>::to_vec),
    }
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| GiltError::io(path, e))
}

fn read_csv_matrix(path: &Path) -> Result<Matrix> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| GiltError::Parse(format!("{}: {e}", path.display())))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| GiltError::Parse(format!("{}: {e}", path.display())))?;
        let row = rec
            .iter()
            .map(|s| {
                s.parse::<f64>().map_err(|_| {
                    GiltError::Parse(format!("{} line {}: `{s}` is not a number", path.display(), i + 1))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Matrix::from_rows(&rows).map_err(|e| GiltError::Consistency(format!("{}: {e}", path.display())))
}

fn read_labels(path: &Path) -> Result<Vec<u32>> {
    read_to_string(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.parse::<u32>()
                .map_err(|_| GiltError::Parse(format!("{}: label `{l}`", path.display())))
        })
        .collect()
}

fn read_edge_list(path: &Path) -> Result<Vec<(usize, usize)>> {
    let text = read_to_string(path)?;
    let mut edges = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split('\t');
        let (a, b) = match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), None) => (a, b),
            _ => {
                return Err(GiltError::Parse(format!(
                    "{} line {}: expected `src<TAB>dst`",
                    path.display(),
                    i + 1
                )))
            }
        };
        let parse = |s: &str| {
            s.trim().parse::<usize>().map_err(|_| {
                GiltError::Parse(format!("{} line {}: bad node index `{s}`", path.display(), i + 1))
            })
        };
        edges.push((parse(a)?, parse(b)?));
    }
    Ok(edges)
}

/// Loads one graph. Directed inputs are symmetrized and deduplicated.
pub fn load_graph(path: &Path, format: &GraphFormat) -> Result<Graph> {
    match format {
        GraphFormat::Json => {
            let text = read_to_string(path)?;
            let j: JsonGraph = serde_json::from_str(&text)
                .map_err(|e| GiltError::Parse(format!("{}: {e}", path.display())))?;
            json_to_graph(j)
        }
        GraphFormat::EdgeList { features, labels } => {
            let edges = read_edge_list(path)?;
            let feats = read_csv_matrix(features)?;
            let n = feats.rows();
            let mut g = Graph::new(n, &edges, feats)?;
            if let Some(lp) = labels {
                g = g.with_node_labels(read_labels(lp)?)?;
            }
            Ok(g)
        }
    }
}

/// Writes the single-file JSON format. Reals are written in shortest
/// round-trip form, so loading the file back is bit-exact.
pub fn write_graph(g: &Graph, path: &Path) -> Result<()> {
    let text = serde_json::to_string(&graph_to_json(g)).map_err(|e| GiltError::Parse(e.to_string()))?;
    fs::write(path, text).map_err(|e| GiltError::io(path, e))
}

/// Writes a graph collection as `{"graphs": [...]}`.
pub fn write_multi_graph(graphs: &[Graph], path: &Path) -> Result<()> {
    write_collection(graphs, None, path)
}

fn write_collection(graphs: &[Graph], split: Option<&[Split]>, path: &Path) -> Result<()> {
    let coll = JsonCollection {
        graphs: graphs.iter().map(graph_to_json).collect(),
        graph_split: split.map(<[Split]>::to_vec),
    };
    let text = serde_json::to_string(&coll).map_err(|e| GiltError::Parse(e.to_string()))?;
    fs::write(path, text).map_err(|e| GiltError::io(path, e))
}

/// Writes the edge-list format next to `edge_path` (features and labels as
/// `<stem>.features.csv` / `<stem>.labels.csv`).
pub fn write_edge_list(g: &Graph, edge_path: &Path) -> Result<()> {
    let mut edges = String::new();
    for &(a, b) in g.edges() {
        edges.push_str(&format!("{a}\t{b}\n"));
    }
    fs::write(edge_path, edges).map_err(|e| GiltError::io(edge_path, e))?;
    let GraphFormat::EdgeList { features, .. } = GraphFormat::infer(edge_path) else {
        return Err(GiltError::Parse("edge-list path must not end in .json".into()));
    };
    let mut w = csv::Writer::from_path(&features).map_err(|e| GiltError::Parse(e.to_string()))?;
    for r in 0..g.node_count() {
        w.write_record(g.features().row(r).iter().map(|x| x.to_string()))
            .map_err(|e| GiltError::Parse(e.to_string()))?;
    }
    w.flush().map_err(|e| GiltError::io(&features, e))?;
    if let Some(labels) = g.node_labels() {
        let stem = edge_path.file_stem().unwrap().to_string_lossy();
        let lp = edge_path.with_file_name(format!("{stem}.labels.csv"));
        let text: String = labels.iter().map(|l| format!("{l}\n")).collect();
        fs::write(&lp, text).map_err(|e| GiltError::io(&lp, e))?;
    }
    Ok(())
}

/// Writes a dataset, splits included, in the JSON format: a single graph
/// for one-graph datasets, a collection otherwise.
pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    if ds.graphs().len() == 1 && ds.graph_split().is_none() {
        write_graph(ds.graph(), path)
    } else {
        write_collection(ds.graphs(), ds.graph_split(), path)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegistryEntry {
    pub name: String,
    pub path: PathBuf,
    /// Restricts the task levels used from this dataset, if set.
    pub levels: Option<Vec<TaskLevel>>,
}

/// Parses a registry file of `name = path [levels]` lines. `#` starts a
/// comment; relative paths resolve against the registry's directory.
/// `levels` is an optional comma-separated list such as `node,link`.
pub fn load_registry(path: &Path) -> Result<Vec<RegistryEntry>> {
    let text = read_to_string(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut out: Vec<RegistryEntry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let (name, rest) = line.split_once('=').ok_or_else(|| {
            GiltError::Parse(format!("{} line {}: expected `name = path`", path.display(), i + 1))
        })?;
        let mut fields = rest.split_whitespace();
        let p = fields.next().ok_or_else(|| {
            GiltError::Parse(format!("{} line {}: missing path", path.display(), i + 1))
        })?;
        let levels = fields
            .next()
            .map(|s| s.split(',').map(str::parse).collect::<Result<Vec<TaskLevel>>>())
            .transpose()?;
        let p = PathBuf::from(p);
        let name = name.trim().to_string();
        if out.iter().any(|e| e.name == name) {
            return Err(GiltError::Parse(format!("duplicate registry name `{name}`")));
        }
        out.push(RegistryEntry {
            name,
            path: if p.is_absolute() { p } else { base.join(p) },
            levels,
        });
    }
    Ok(out)
}

/// Loads a registry entry as a dataset. JSON files holding `{"graphs": ..}`
/// become graph-classification collections.
pub fn load_dataset(entry: &RegistryEntry) -> Result<Dataset> {
    let format = GraphFormat::infer(&entry.path);
    let ds = if format == GraphFormat::Json {
        let text = read_to_string(&entry.path)?;
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| GiltError::Parse(format!("{}: {e}", entry.path.display())))?;
        if value.get("graphs").is_some() {
            let coll: JsonCollection = serde_json::from_value(value)
                .map_err(|e| GiltError::Parse(format!("{}: {e}", entry.path.display())))?;
            let graphs = coll.graphs.into_iter().map(json_to_graph).collect::<Result<Vec<_>>>()?;
            let ds = Dataset::new(entry.name.clone(), graphs)?;
            match coll.graph_split {
                Some(s) => ds.with_graph_split(s)?,
                None => ds,
            }
        } else {
            let j: JsonGraph = serde_json::from_value(value)
                .map_err(|e| GiltError::Parse(format!("{}: {e}", entry.path.display())))?;
            Dataset::single(entry.name.clone(), json_to_graph(j)?)?
        }
    } else {
        Dataset::single(entry.name.clone(), load_graph(&entry.path, &format)?)?
    };
    match &entry.levels {
        Some(l) => ds.with_levels(l.clone()),
        None => Ok(ds),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path_graph() -> Graph {
        let f = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.5, 0.5]]).unwrap();
        Graph::new(3, &[(0, 1), (1, 2)], f).unwrap()
    }

    #[test]
    fn loads_three_node_path_from_edge_list() {
        let dir = tempfile::tempdir().unwrap();
        let ep = dir.path().join("path.tsv");
        fs::write(&ep, "0\t1\n1\t2\n2\t1\n").unwrap();
        fs::write(dir.path().join("path.features.csv"), "1,0\n0,1\n0.5,0.5\n").unwrap();
        let g = load_graph(&ep, &GraphFormat::infer(&ep)).unwrap();
        assert_eq!(g.node_count(), 3);
        assert_eq!(g.edge_count(), 2);
    }

    #[test]
    fn out_of_range_edge_in_file() {
        let dir = tempfile::tempdir().unwrap();
        let ep = dir.path().join("g.tsv");
        fs::write(&ep, "0\t5\n").unwrap();
        fs::write(dir.path().join("g.features.csv"), "1\n2\n3\n").unwrap();
        let r = load_graph(&ep, &GraphFormat::infer(&ep));
        assert!(matches!(r, Err(GiltError::Consistency(_))), "{r:?}");
    }

    #[test]
    fn nan_feature_row_is_non_finite_error() {
        let dir = tempfile::tempdir().unwrap();
        let ep = dir.path().join("g.tsv");
        fs::write(&ep, "0\t1\n").unwrap();
        fs::write(dir.path().join("g.features.csv"), "1,2\nNaN,0\n").unwrap();
        let r = load_graph(&ep, &GraphFormat::infer(&ep));
        assert!(matches!(r, Err(GiltError::NonFinite(_))), "{r:?}");

        let jp = dir.path().join("g.json");
        fs::write(&jp, r#"{"nodes":2,"edges":[[0,1]],"features":[[1.0],["NaN"]]}"#).unwrap();
        let r = load_graph(&jp, &GraphFormat::Json);
        assert!(matches!(r, Err(GiltError::NonFinite(_))), "{r:?}");
    }

    #[test]
    fn malformed_files_are_parse_errors() {
        let dir = tempfile::tempdir().unwrap();
        let jp = dir.path().join("g.json");
        fs::write(&jp, "{not json").unwrap();
        assert!(matches!(load_graph(&jp, &GraphFormat::Json), Err(GiltError::Parse(_))));
        let ep = dir.path().join("g.tsv");
        fs::write(&ep, "0 1 2\n").unwrap();
        fs::write(dir.path().join("g.features.csv"), "1\n2\n").unwrap();
        assert!(matches!(load_graph(&ep, &GraphFormat::infer(&ep)), Err(GiltError::Parse(_))));
    }

    #[test]
    fn feature_row_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let jp = dir.path().join("g.json");
        fs::write(&jp, r#"{"nodes":3,"edges":[],"features":[[1.0],[2.0]]}"#).unwrap();
        assert!(matches!(load_graph(&jp, &GraphFormat::Json), Err(GiltError::Consistency(_))));
    }

    #[test]
    fn edge_list_round_trip_with_labels() {
        let dir = tempfile::tempdir().unwrap();
        let g = path_graph().with_node_labels(vec![0, 1, 1]).unwrap();
        let ep = dir.path().join("p.tsv");
        write_edge_list(&g, &ep).unwrap();
        let back = load_graph(&ep, &GraphFormat::infer(&ep)).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn registry_resolves_relative_paths_and_levels() {
        let dir = tempfile::tempdir().unwrap();
        let g = path_graph().with_node_labels(vec![0, 1, 1]).unwrap();
        write_graph(&g, &dir.path().join("a.json")).unwrap();
        let rp = dir.path().join("registry.txt");
        fs::write(&rp, "# datasets\na = a.json node\n").unwrap();
        let reg = load_registry(&rp).unwrap();
        assert_eq!(reg[0].path, dir.path().join("a.json"));
        let ds = load_dataset(&reg[0]).unwrap();
        assert_eq!(ds.levels(), &[TaskLevel::Node]);
    }

    #[test]
    fn splits_round_trip_through_json() {
        use crate::graph_store::{assign_graph_split, assign_split, SplitFractions};
        let dir = tempfile::tempdir().unwrap();
        let f = SplitFractions::new(0.5, 0.0, 0.5).unwrap();
        let g = path_graph().with_node_labels(vec![0, 1, 1]).unwrap();
        let g = assign_split(&g, f, TaskLevel::Node, 1).unwrap();
        let g = assign_split(&g, f, TaskLevel::Link, 2).unwrap();
        let ds = Dataset::single("p", g).unwrap();
        let jp = dir.path().join("p.json");
        write_dataset(&ds, &jp).unwrap();
        let entry = RegistryEntry { name: "p".into(), path: jp, levels: None };
        assert_eq!(load_dataset(&entry).unwrap(), ds);

        let coll: Vec<Graph> = (0..4).map(|i| path_graph().with_graph_label(i % 2)).collect();
        let ds = assign_graph_split(&Dataset::new("c", coll).unwrap(), f, 3).unwrap();
        let cp = dir.path().join("c.json");
        write_dataset(&ds, &cp).unwrap();
        let entry = RegistryEntry { name: "c".into(), path: cp, levels: None };
        assert_eq!(load_dataset(&entry).unwrap(), ds);
    }

    #[test]
    fn edge_split_requires_canonical_edges() {
        let dir = tempfile::tempdir().unwrap();
        let jp = dir.path().join("g.json");
        let body = r#"{"nodes":3,"edges":[[1,2],[0,1]],"features":[[1.0],[2.0],[3.0]],"edge_split":["train","test"]}"#;
        fs::write(&jp, body).unwrap();
        assert!(matches!(load_graph(&jp, &GraphFormat::Json), Err(GiltError::Consistency(_))));
    }
}
