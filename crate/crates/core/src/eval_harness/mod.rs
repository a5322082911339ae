//! Few-shot evaluation: support from the train split, query from the test
//! split, inference mode only. Runs are independent and parallel; their
//! results are aggregated in seed order.

pub mod metrics;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use metrics::{accuracy, hits_at_k, mean_sd, roc_auc};

use crate::episode_sampler::{
    check_eval_episode, sample_graph_episode, sample_link_episode, sample_node_episode, Episode, PoolPolicy,
};
use crate::error::{GiltError, Result};
use crate::graph_store::{Dataset, Split, TaskLevel};
use crate::model::{predict_episode, Ablation, Model, PreparedDataset};

/// Query cap for link and graph episodes. Node episodes use the full test split.
pub const QUERY_CAP: usize = 2048;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    Accuracy,
    RocAuc,
    HitsAt(usize),
}

impl Metric {
    pub fn name(&self) -> String {
        match self {
            Metric::Accuracy => "accuracy".into(),
            Metric::RocAuc => "roc-auc".into(),
            Metric::HitsAt(k) => format!("hits@{k}"),
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = GiltError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "accuracy" | "acc" => Ok(Metric::Accuracy),
            "roc-auc" | "auc" | "rocauc" | "roc_auc" => Ok(Metric::RocAuc),
            _ => s
                .strip_prefix("hits@")
                .and_then(|k| k.parse().ok())
                .filter(|&k| k > 0)
                .map(Metric::HitsAt)
                .ok_or_else(|| GiltError::Parse(format!("unknown metric `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Protocol {
    pub level: TaskLevel,
    pub n_way: usize,
    pub k_shot: usize,
    pub metric: Metric,
    /// One run per seed.
    pub seeds: Vec<u64>,
    /// Negatives per positive in link episodes.
    pub neg_ratio: usize,
    pub ablation: Ablation,
}

impl Protocol {
    /// Five runs, seeds 0..4.
    pub fn new(level: TaskLevel, n_way: usize, k_shot: usize, metric: Metric) -> Protocol {
        Protocol { level, n_way, k_shot, metric, seeds: (0..5).collect(), neg_ratio: 1, ablation: Ablation::default() }
    }

    pub fn validate(&self, model: &Model) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(GiltError::InvalidSpec("evaluation needs at least one run".into()));
        }
        if self.level == TaskLevel::Link && self.n_way != 2 {
            return Err(GiltError::InvalidSpec("link episodes are 2-way".into()));
        }
        match self.metric {
            Metric::HitsAt(_) if self.level != TaskLevel::Link => {
                Err(GiltError::InvalidSpec("Hits@K applies to link tasks only".into()))
            }
            Metric::RocAuc if self.n_way != 2 => Err(GiltError::InvalidSpec("ROC-AUC needs 2-way episodes".into())),
            _ => self.ablation.validate(&model.config),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub level: TaskLevel,
    pub n_way: usize,
    pub k_shot: usize,
    pub metric: String,
    pub seeds: Vec<u64>,
    pub checkpoint_id: String,
    pub ablation: Ablation,
    pub runs: Vec<f64>,
    pub mean: f64,
    pub sd: Option<f64>,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str =
        "dataset,level,n_way,k_shot,metric,runs,mean,sd,checkpoint_id,encoder_layers,transformer_layers,head";

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn csv_row(&self) -> String {
        let opt = |x: Option<usize>| x.map_or(String::new(), |v| v.to_string());
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.dataset,
            self.level.name(),
            self.n_way,
            self.k_shot,
            self.metric,
            self.runs.len(),
            self.mean,
            self.sd.map_or(String::new(), |s| s.to_string()),
            self.checkpoint_id,
            opt(self.ablation.encoder_layers),
            opt(self.ablation.transformer_layers),
            self.ablation.head.map_or(String::new(), |h| {
                serde_json::to_string(&h).expect("head serializes").trim_matches('"').to_string()
            }),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub k: usize,
    pub mean: f64,
    pub sd: Option<f64>,
}

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut out = String::from("K,mean,sd\n");
    for p in points {
        out.push_str(&format!("{},{},{}\n", p.k, p.mean, p.sd.map_or(String::new(), |s| s.to_string())));
    }
    out
}

/// Samples one evaluation episode of the protocol.
pub fn sample_eval_episode(data: &PreparedDataset, p: &Protocol, k_shot: usize, seed: u64) -> Result<Episode> {
    let ds = &data.dataset;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e = match p.level {
        TaskLevel::Node => sample_node_episode(ds.graph(), &ds.name, p.n_way, k_shot, None, PoolPolicy::Eval, &mut rng)?,
        TaskLevel::Link => {
            sample_link_episode(ds.graph(), &ds.name, k_shot, Some(QUERY_CAP), p.neg_ratio, PoolPolicy::Eval, &mut rng)?
        }
        TaskLevel::Graph => sample_graph_episode(ds, p.n_way, k_shot, Some(QUERY_CAP), PoolPolicy::Eval, &mut rng)?,
    };
    Ok(e)
}

/// Scores one episode. Leakage or split violations abort with a protocol
/// error before the model runs.
pub fn score_episode(model: &Model, data: &PreparedDataset, e: &Episode, metric: Metric, ablation: &Ablation) -> Result<f64> {
    check_eval_episode(e, &data.dataset)?;
    let res = predict_episode(model, data, e, ablation)?;
    let labels: Vec<usize> = e.query_labels.iter().map(|&c| c as usize).collect();
    match metric {
        Metric::Accuracy => accuracy(&res.predicted, &labels),
        Metric::RocAuc | Metric::HitsAt(_) => {
            if e.n_way != 2 {
                return Err(GiltError::InvalidSpec(format!("{} needs 2-way episodes", metric.name())));
            }
            // the episode class whose original id is 1 counts as positive
            let pos = e.class_ids.iter().position(|&c| c == 1).unwrap_or(1);
            let scores: Vec<f64> = (0..res.probs.rows()).map(|r| res.probs.get(r, pos)).collect();
            let is_pos: Vec<bool> = labels.iter().map(|&l| l == pos).collect();
            if let Metric::HitsAt(k) = metric {
                let (p, n): (Vec<(f64, bool)>, Vec<(f64, bool)>) =
                    scores.iter().copied().zip(is_pos.iter().copied()).partition(|x| x.1);
                let p: Vec<f64> = p.into_iter().map(|x| x.0).collect();
                let n: Vec<f64> = n.into_iter().map(|x| x.0).collect();
                hits_at_k(&p, &n, k)
            } else {
                roc_auc(&scores, &is_pos)
            }
        }
    }
}

/// Binary views of a multi-label graph dataset, one per task. Graphs with
/// a missing task value are moved to the valid split, which evaluation
/// never reads.
fn task_views(data: &PreparedDataset) -> Result<Vec<PreparedDataset>> {
    let ds = &data.dataset;
    let n_tasks = ds.graphs()[0].graph_tasks().map_or(0, |t| t.len());
    let base_split = ds
        .graph_split()
        .ok_or_else(|| GiltError::Protocol("evaluation dataset has no split".into()))?;
    let mut out = Vec::new();
    for t in 0..n_tasks {
        let mut graphs = Vec::with_capacity(ds.graphs().len());
        let mut split = Vec::with_capacity(ds.graphs().len());
        for (g, &s) in ds.graphs().iter().zip(base_split) {
            let v = g.graph_tasks().and_then(|ts| ts.get(t).copied().flatten());
            graphs.push(g.clone().with_graph_label(v.unwrap_or(false) as u32));
            split.push(if v.is_some() { s } else { Split::Valid });
        }
        let view = Dataset::new(format!("{}#task{t}", ds.name), graphs)?.with_graph_split(split)?;
        out.push(PreparedDataset { dataset: view, graphs: data.graphs.clone(), alignment: data.alignment.clone() });
    }
    Ok(out)
}

fn is_multilabel(data: &PreparedDataset) -> bool {
    let g = &data.dataset.graphs()[0];
    g.graph_label().is_none() && g.graph_tasks().is_some()
}

fn run_once(model: &Model, data: &PreparedDataset, views: &[PreparedDataset], p: &Protocol, k: usize, seed: u64) -> Result<f64> {
    if views.is_empty() {
        let e = sample_eval_episode(data, p, k, seed)?;
        return score_episode(model, data, &e, p.metric, &p.ablation);
    }
    // mean AUC over the tasks whose episode has both classes
    let mut aucs = Vec::new();
    for (t, view) in views.iter().enumerate() {
        let e = match sample_eval_episode(view, p, k, seed ^ ((t as u64 + 1) << 32)) {
            Ok(e) => e,
            Err(GiltError::Insufficient(_)) => continue,
            Err(err) => return Err(err),
        };
        match score_episode(model, view, &e, p.metric, &p.ablation) {
            Ok(a) => aucs.push(a),
            Err(GiltError::Insufficient(_)) => {}
            Err(err) => return Err(err),
        }
    }
    if aucs.is_empty() {
        return Err(GiltError::Insufficient(format!("no task of `{}` yields a two-class episode", data.name())));
    }
    Ok(aucs.iter().sum::<f64>() / aucs.len() as f64)
}

fn runs_at(model: &Model, data: &PreparedDataset, p: &Protocol, k: usize) -> Result<Vec<f64>> {
    p.validate(model)?;
    if !data.dataset.supports(p.level) {
        return Err(GiltError::Unsupported(format!("`{}` has no {} task", data.name(), p.level.name())));
    }
    let views = if p.level == TaskLevel::Graph && is_multilabel(data) {
        if p.metric != Metric::RocAuc {
            return Err(GiltError::InvalidSpec("multi-label datasets are scored by ROC-AUC".into()));
        }
        task_views(data)?
    } else {
        Vec::new()
    };
    p.seeds.par_iter().map(|&s| run_once(model, data, &views, p, k, s)).collect()
}

pub fn evaluate(model: &Model, checkpoint_id: &str, data: &PreparedDataset, p: &Protocol) -> Result<EvalReport> {
    let runs = runs_at(model, data, p, p.k_shot)?;
    let (mean, sd) = mean_sd(&runs);
    Ok(EvalReport {
        dataset: data.name().to_string(),
        level: p.level,
        n_way: p.n_way,
        k_shot: p.k_shot,
        metric: p.metric.name(),
        seeds: p.seeds.clone(),
        checkpoint_id: checkpoint_id.to_string(),
        ablation: p.ablation.clone(),
        runs,
        mean,
        sd,
    })
}

/// Repeats the protocol for each shot count.
pub fn shot_sweep(model: &Model, data: &PreparedDataset, p: &Protocol, ks: &[usize]) -> Result<Vec<SweepPoint>> {
    ks.iter()
        .map(|&k| {
            let (mean, sd) = mean_sd(&runs_at(model, data, p, k)?);
            Ok(SweepPoint { k, mean, sd })
        })
        .collect()
}
