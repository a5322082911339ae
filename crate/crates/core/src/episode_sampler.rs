//! N-way K-shot episodes for node, link and graph tasks.
//!
//! Class ids are remapped per episode to `0..N` in the order the classes
//! were drawn. Link episodes are binary: class 1 holds true edges, class 0
//! sampled non-edges at `neg_ratio` negatives per positive.

use std::collections::HashSet;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GiltError, Result};
use crate::graph_store::{Dataset, Graph, Split, TaskLevel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ItemRef {
    Node(u32),
    /// Canonical ordered pair `(u, v)` with `u <= v`.
    Link(u32, u32),
    Graph(u32),
}

impl ItemRef {
    pub fn link(u: usize, v: usize) -> ItemRef {
        if u <= v {
            ItemRef::Link(u as u32, v as u32)
        } else {
            ItemRef::Link(v as u32, u as u32)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupportItem {
    pub item: ItemRef,
    pub class: u32,
}

/// Record of the augmentation applied to an episode. Masks are regenerated
/// from `seed`, so the record stays small and reproducible.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Augmentation {
    pub feat_drop: f64,
    pub edge_drop: f64,
    pub seed: u64,
}

impl Augmentation {
    fn rng(&self, stream: u64, graph: usize) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed ^ (graph as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        r.set_stream(stream);
        r
    }

    /// Row-major keep mask over an `n × d` feature matrix.
    pub fn feature_keep_mask(&self, graph: usize, n: usize, d: usize) -> Vec<bool> {
        let mut r = self.rng(1, graph);
        (0..n * d).map(|_| r.random::<f64>() >= self.feat_drop).collect()
    }

    /// Keep mask over the stored edges of a graph.
    pub fn edge_keep_mask(&self, graph: usize, m: usize) -> Vec<bool> {
        let mut r = self.rng(2, graph);
        (0..m).map(|_| r.random::<f64>() >= self.edge_drop).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub level: TaskLevel,
    pub n_way: usize,
    pub k_shot: usize,
    pub support: Vec<SupportItem>,
    pub query: Vec<ItemRef>,
    /// Held out from the model; used for the loss and metrics.
    pub query_labels: Vec<u32>,
    /// Dataset the items refer to.
    pub source: String,
    /// Original class id of every episode class.
    pub class_ids: Vec<u32>,
    /// Edges removed from message passing (link tasks), canonical pairs.
    pub hidden_edges: Vec<(u32, u32)>,
    pub augmentation: Option<Augmentation>,
}

impl Episode {
    pub fn support_labels(&self) -> Vec<usize> {
        self.support.iter().map(|s| s.class as usize).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("episode serializes")
    }

    pub fn from_json(s: &str) -> Result<Episode> {
        serde_json::from_str(s).map_err(|e| GiltError::Parse(e.to_string()))
    }
}

/// Where support and query items may come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolPolicy {
    /// Support and query both drawn, disjointly, from the train split (or
    /// from everything when no split is assigned).
    Pretrain,
    /// Support from the train split, query from the test split.
    Eval,
}

fn in_pool(split: Option<&[Split]>, i: usize, wanted: Split, policy: PoolPolicy) -> Result<bool> {
    match (split, policy) {
        (Some(s), _) => Ok(s[i] == wanted),
        (None, PoolPolicy::Pretrain) => Ok(true),
        (None, PoolPolicy::Eval) => Err(GiltError::Protocol(
            "evaluation episodes need an assigned split".into(),
        )),
    }
}

/// Draws `k` distinct elements of `pool` uniformly; returns them in draw order.
fn choose<R: Rng + ?Sized, T: Copy>(pool: &[T], k: usize, rng: &mut R) -> Vec<T> {
    sample(rng, pool.len(), k).into_iter().map(|i| pool[i]).collect()
}

/// Shared class-balanced sampler over labeled items.
#[allow(clippy::too_many_arguments)]
fn sample_labeled<R: Rng + ?Sized>(
    labels: &[u32],
    split: Option<&[Split]>,
    n_way: usize,
    k_shot: usize,
    query_size: Option<usize>,
    policy: PoolPolicy,
    rng: &mut R,
    what: &str,
) -> Result<(Vec<(usize, u32)>, Vec<(usize, u32)>, Vec<u32>)> {
    if n_way < 2 || k_shot < 1 {
        return Err(GiltError::InvalidSpec(format!("need N >= 2 and K >= 1, got N={n_way} K={k_shot}")));
    }
    let n_classes = labels.iter().max().map_or(0, |&m| m as usize + 1);
    let mut support_pool: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    let mut query_pool: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &c) in labels.iter().enumerate() {
        if in_pool(split, i, Split::Train, policy)? {
            support_pool[c as usize].push(i);
        }
        if policy == PoolPolicy::Eval && in_pool(split, i, Split::Test, policy)? {
            query_pool[c as usize].push(i);
        }
    }
    let eligible: Vec<usize> = (0..n_classes).filter(|&c| support_pool[c].len() >= k_shot).collect();
    if eligible.len() < n_way {
        return Err(GiltError::Insufficient(format!(
            "{} {what} classes have >= {k_shot} train items, {n_way} requested",
            eligible.len()
        )));
    }
    let classes = choose(&eligible, n_way, rng);
    let mut support = Vec::with_capacity(n_way * k_shot);
    let mut candidates = Vec::new();
    for (ep_class, &c) in classes.iter().enumerate() {
        let chosen = choose(&support_pool[c], k_shot, rng);
        let chosen_set: HashSet<usize> = chosen.iter().copied().collect();
        support.extend(chosen.iter().map(|&i| (i, ep_class as u32)));
        let pool = match policy {
            PoolPolicy::Eval => &query_pool[c],
            PoolPolicy::Pretrain => &support_pool[c],
        };
        candidates.extend(
            pool.iter()
                .filter(|i| !chosen_set.contains(i))
                .map(|&i| (i, ep_class as u32)),
        );
    }
    candidates.sort_unstable();
    if candidates.is_empty() {
        return Err(GiltError::Insufficient(format!("no query {what} items left")));
    }
    let query = match query_size {
        Some(q) if q < candidates.len() => {
            let mut picked = choose(&candidates, q, rng);
            picked.sort_unstable();
            picked
        }
        _ => candidates,
    };
    Ok((support, query, classes.iter().map(|&c| c as u32).collect()))
}

pub fn sample_node_episode<R: Rng + ?Sized>(
    g: &Graph,
    source: &str,
    n_way: usize,
    k_shot: usize,
    query_size: Option<usize>,
    policy: PoolPolicy,
    rng: &mut R,
) -> Result<Episode> {
    let labels = g
        .node_labels()
        .ok_or_else(|| GiltError::Unsupported(format!("`{source}` has no node labels")))?;
    let (support, query, class_ids) =
        sample_labeled(labels, g.node_split(), n_way, k_shot, query_size, policy, rng, "node")?;
    Ok(Episode {
        level: TaskLevel::Node,
        n_way,
        k_shot,
        support: support
            .into_iter()
            .map(|(i, c)| SupportItem { item: ItemRef::Node(i as u32), class: c })
            .collect(),
        query: query.iter().map(|&(i, _)| ItemRef::Node(i as u32)).collect(),
        query_labels: query.iter().map(|&(_, c)| c).collect(),
        source: source.to_string(),
        class_ids,
        hidden_edges: Vec::new(),
        augmentation: None,
    })
}

pub fn sample_graph_episode<R: Rng + ?Sized>(
    ds: &Dataset,
    n_way: usize,
    k_shot: usize,
    query_size: Option<usize>,
    policy: PoolPolicy,
    rng: &mut R,
) -> Result<Episode> {
    let labels: Vec<u32> = ds
        .graphs()
        .iter()
        .map(|g| g.graph_label())
        .collect::<Option<Vec<u32>>>()
        .ok_or_else(|| GiltError::Unsupported(format!("`{}` lacks graph labels", ds.name)))?;
    let (support, query, class_ids) =
        sample_labeled(&labels, ds.graph_split(), n_way, k_shot, query_size, policy, rng, "graph")?;
    Ok(Episode {
        level: TaskLevel::Graph,
        n_way,
        k_shot,
        support: support
            .into_iter()
            .map(|(i, c)| SupportItem { item: ItemRef::Graph(i as u32), class: c })
            .collect(),
        query: query.iter().map(|&(i, _)| ItemRef::Graph(i as u32)).collect(),
        query_labels: query.iter().map(|&(_, c)| c).collect(),
        source: ds.name.clone(),
        class_ids,
        hidden_edges: Vec::new(),
        augmentation: None,
    })
}

/// Uniform non-edges, rejecting true edges of any split, self-pairs and
/// anything in `taken`. Gives up after a bounded number of draws.
fn sample_non_edges<R: Rng + ?Sized>(
    g: &Graph,
    count: usize,
    taken: &mut HashSet<(u32, u32)>,
    rng: &mut R,
) -> Result<Vec<(u32, u32)>> {
    let n = g.node_count();
    let total_pairs = n * n.saturating_sub(1) / 2;
    let available = total_pairs.saturating_sub(g.edge_count() + taken.len());
    if count > available || n < 2 {
        return Err(GiltError::Insufficient(format!(
            "graph too dense: {count} non-edges requested, at most {available} exist"
        )));
    }
    let max_tries = 200 * count + 1000;
    let mut out = Vec::with_capacity(count);
    let mut tries = 0;
    while out.len() < count {
        tries += 1;
        if tries > max_tries {
            return Err(GiltError::Insufficient(format!(
                "graph too dense: found {} of {count} non-edges after {max_tries} draws",
                out.len()
            )));
        }
        let u = rng.random_range(0..n);
        let v = rng.random_range(0..n);
        if u == v || g.has_edge(u, v) {
            continue;
        }
        let key = if u < v { (u as u32, v as u32) } else { (v as u32, u as u32) };
        if taken.insert(key) {
            out.push(key);
        }
    }
    Ok(out)
}

pub fn sample_link_episode<R: Rng + ?Sized>(
    g: &Graph,
    source: &str,
    k_shot: usize,
    query_size: Option<usize>,
    neg_ratio: usize,
    policy: PoolPolicy,
    rng: &mut R,
) -> Result<Episode> {
    if k_shot < 1 || neg_ratio < 1 {
        return Err(GiltError::InvalidSpec("link episodes need K >= 1 and neg_ratio >= 1".into()));
    }
    let split = g.edge_split();
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut hidden = Vec::new();
    for (e, &edge) in g.edges().iter().enumerate() {
        if in_pool(split, e, Split::Train, policy)? {
            train.push(edge);
        } else {
            hidden.push(edge);
            if in_pool(split, e, Split::Test, policy)? {
                test.push(edge);
            }
        }
    }
    if train.len() < k_shot {
        return Err(GiltError::Insufficient(format!(
            "{} train edges, K = {k_shot}",
            train.len()
        )));
    }
    let support_pos = choose(&train, k_shot, rng);
    let mut taken: HashSet<(u32, u32)> = HashSet::new();
    let support_neg = sample_non_edges(g, k_shot * neg_ratio, &mut taken, rng)?;

    let pos_pool: Vec<(u32, u32)> = match policy {
        PoolPolicy::Eval => test,
        PoolPolicy::Pretrain => {
            let used: HashSet<(u32, u32)> = support_pos.iter().copied().collect();
            train.into_iter().filter(|e| !used.contains(e)).collect()
        }
    };
    if pos_pool.is_empty() {
        return Err(GiltError::Insufficient("no positive query edges left".into()));
    }
    let n_pos = match query_size {
        Some(q) => (q / (1 + neg_ratio)).max(1).min(pos_pool.len()),
        None => pos_pool.len(),
    };
    let mut query_pos = if n_pos < pos_pool.len() { choose(&pos_pool, n_pos, rng) } else { pos_pool };
    query_pos.sort_unstable();
    let query_neg = sample_non_edges(g, n_pos * neg_ratio, &mut taken, rng)?;
    if policy == PoolPolicy::Pretrain {
        hidden.extend(query_pos.iter().copied());
        hidden.sort_unstable();
    }

    let mut support: Vec<SupportItem> = support_pos
        .iter()
        .map(|&(u, v)| SupportItem { item: ItemRef::Link(u, v), class: 1 })
        .collect();
    support.extend(support_neg.iter().map(|&(u, v)| SupportItem { item: ItemRef::Link(u, v), class: 0 }));
    let mut query: Vec<ItemRef> = query_pos.iter().map(|&(u, v)| ItemRef::Link(u, v)).collect();
    let mut query_labels = vec![1u32; query.len()];
    query.extend(query_neg.iter().map(|&(u, v)| ItemRef::Link(u, v)));
    query_labels.extend(std::iter::repeat_n(0u32, query_neg.len()));
    Ok(Episode {
        level: TaskLevel::Link,
        n_way: 2,
        k_shot,
        support,
        query,
        query_labels,
        source: source.to_string(),
        class_ids: vec![0, 1],
        hidden_edges: hidden,
        augmentation: None,
    })
}

/// Attaches a feature/edge dropout record. Zero probabilities leave the
/// episode untouched.
pub fn augment<R: Rng + ?Sized>(e: &Episode, feat_drop: f64, edge_drop: f64, rng: &mut R) -> Result<Episode> {
    for (name, p) in [("feat_drop", feat_drop), ("edge_drop", edge_drop)] {
        if !(0.0..1.0).contains(&p) {
            return Err(GiltError::InvalidSpec(format!("{name} = {p} must be in [0,1)")));
        }
    }
    let mut out = e.clone();
    if feat_drop > 0.0 || edge_drop > 0.0 {
        out.augmentation = Some(Augmentation {
            feat_drop,
            edge_drop,
            seed: rng.random(),
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShotSchedule {
    pub start_shots: usize,
    pub end_shots: usize,
    pub total_epochs: usize,
}

impl ShotSchedule {
    pub fn new(start_shots: usize, end_shots: usize, total_epochs: usize) -> Result<Self> {
        if end_shots < 1 || start_shots < end_shots || total_epochs < 1 {
            return Err(GiltError::InvalidSpec(format!(
                "shot schedule needs start >= end >= 1 and epochs >= 1, got {start_shots}->{end_shots} over {total_epochs}"
            )));
        }
        Ok(ShotSchedule { start_shots, end_shots, total_epochs })
    }

    /// Linear from `start_shots` at epoch 0 to `end_shots` at the last
    /// epoch, rounded half up.
    pub fn shots_at(&self, epoch: usize) -> usize {
        if self.total_epochs <= 1 {
            return self.start_shots;
        }
        let t = epoch.min(self.total_epochs - 1) as f64 / (self.total_epochs - 1) as f64;
        let x = self.start_shots as f64 + (self.end_shots as f64 - self.start_shots as f64) * t;
        (x + 0.5).floor() as usize
    }
}

/// Asserts the evaluation protocol on one episode: support and query are
/// disjoint, support items are train-tagged, positive query items are
/// test-tagged, and link negatives are true non-edges.
pub fn check_eval_episode(e: &Episode, ds: &Dataset) -> Result<()> {
    let support: HashSet<ItemRef> = e.support.iter().map(|s| s.item).collect();
    if let Some(q) = e.query.iter().find(|q| support.contains(q)) {
        return Err(GiltError::Protocol(format!("query item {q:?} also appears in the support set")));
    }
    let tag_of = |item: &ItemRef| -> Result<Option<Split>> {
        let missing = || GiltError::Protocol("evaluation dataset has no split".into());
        Ok(match *item {
            ItemRef::Node(i) => Some(ds.graph().node_split().ok_or_else(missing)?[i as usize]),
            ItemRef::Graph(i) => Some(ds.graph_split().ok_or_else(missing)?[i as usize]),
            ItemRef::Link(u, v) => {
                let g = ds.graph();
                match g.edges().binary_search(&(u, v)) {
                    Ok(pos) => Some(g.edge_split().ok_or_else(missing)?[pos]),
                    Err(_) => None,
                }
            }
        })
    };
    for s in &e.support {
        match (tag_of(&s.item)?, e.level) {
            (Some(Split::Train), _) => {}
            (None, TaskLevel::Link) if s.class == 0 => {}
            (tag, _) => {
                return Err(GiltError::Protocol(format!(
                    "support item {:?} (class {}) has split {tag:?}",
                    s.item, s.class
                )))
            }
        }
    }
    for (q, &label) in e.query.iter().zip(&e.query_labels) {
        match (tag_of(q)?, e.level) {
            (Some(Split::Test), _) => {}
            (None, TaskLevel::Link) if label == 0 => {}
            (tag, _) => {
                return Err(GiltError::Protocol(format!("query item {q:?} has split {tag:?}")));
            }
        }
    }
    Ok(())
}
