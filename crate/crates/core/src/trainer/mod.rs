//! Episodic multi-task pre-training of the single shared parameter set.

mod adamw;
mod checkpoint;

use std::collections::BTreeMap;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::episode_sampler::{
    augment, sample_graph_episode, sample_link_episode, sample_node_episode, Episode, PoolPolicy, ShotSchedule,
};
use crate::error::{GiltError, Result};
use crate::feature_align::{AlignMode, AlignSpec};
use crate::graph_store::{make_synthetic, Corpus, Dataset, Split, SyntheticSpec, TaskLevel};
use crate::icl_transformer::TransformerConfig;
use crate::model::{episode_gradients, episode_loss, prepare, Model, ModelConfig, PreparedDataset};
use crate::numerics::{grad_check, GradCheckConfig, GradCheckReport, Matrix};
use crate::proto_head::{HeadMode, DEFAULT_TEMPERATURE};
use crate::struct_encoder::{EncoderConfig, EncoderVariant};

pub use adamw::{adamw_step, clip_global_norm, AdamHyper, AdamState, Optimizer};
pub use checkpoint::{Checkpoint, Precision, CHECKPOINT_VERSION};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerLevel<T> {
    pub node: T,
    pub link: T,
    pub graph: T,
}

impl<T: Copy> PerLevel<T> {
    pub fn get(&self, level: TaskLevel) -> T {
        match level {
            TaskLevel::Node => self.node,
            TaskLevel::Link => self.link,
            TaskLevel::Graph => self.graph,
        }
    }

    pub fn set(&mut self, level: TaskLevel, v: T) {
        match level {
            TaskLevel::Node => self.node = v,
            TaskLevel::Link => self.link = v,
            TaskLevel::Graph => self.graph = v,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    LinearDecay,
    Cosine,
    /// Linear warm-up over `warmup_steps`, then linear decay.
    Warmup,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub schema_version: u32,
    pub model: ModelConfig,
    pub optimizer: Optimizer,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub lr_schedule: LrSchedule,
    pub warmup_steps: usize,
    /// Episodes drawn per active level per epoch.
    pub episodes_per_level: usize,
    /// Episodes per level in one optimizer step.
    pub batch: PerLevel<usize>,
    pub loss_weights: PerLevel<f64>,
    pub levels: Vec<TaskLevel>,
    pub n_way: PerLevel<usize>,
    pub start_shots: usize,
    pub end_shots: usize,
    pub query_size: usize,
    pub neg_ratio: usize,
    pub feat_drop: f64,
    pub edge_drop: f64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Run the finite-difference check on a tiny model before training.
    pub preflight: bool,
    pub seed: u64,
}

impl TrainConfig {
    /// Hyperparameters of the published configuration.
    pub fn paper_table6() -> Self {
        TrainConfig {
            schema_version: SCHEMA_VERSION,
            model: ModelConfig {
                align: AlignSpec::pad(512),
                encoder: EncoderConfig { layers: 5, variant: EncoderVariant::Linear },
                transformer: TransformerConfig {
                    layers: 5,
                    heads: 4,
                    ffn_hidden: 4096,
                    dropout: 0.1,
                    unshared_attention: false,
                    zero_init_residual: true,
                },
                head: HeadMode::ClassSpace,
                temperature: DEFAULT_TEMPERATURE,
            },
            optimizer: Optimizer::AdamW,
            lr: 2e-6,
            weight_decay: 4e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 50,
            lr_schedule: LrSchedule::LinearDecay,
            warmup_steps: 0,
            episodes_per_level: 200,
            batch: PerLevel { node: 8, link: 8, graph: 8 },
            loss_weights: PerLevel { node: 0.53, link: 2.74, graph: 0.42 },
            levels: TaskLevel::ALL.to_vec(),
            n_way: PerLevel { node: 5, link: 2, graph: 2 },
            start_shots: 20,
            end_shots: 5,
            query_size: 64,
            neg_ratio: 3,
            feat_drop: 0.1,
            edge_drop: 0.1,
            grad_clip: Some(1.0),
            preflight: true,
            seed: 0,
        }
    }

    /// Workstation-sized model and schedule.
    pub fn desk() -> Self {
        let mut c = Self::paper_table6();
        c.model.align = AlignSpec::pad(32);
        c.model.encoder.layers = 4;
        c.model.transformer.layers = 2;
        c.model.transformer.ffn_hidden = 128;
        c.lr = 1e-3;
        c.epochs = 20;
        c.episodes_per_level = 200;
        c.levels = vec![TaskLevel::Node];
        c.n_way.node = 4;
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper-table6" => Ok(Self::paper_table6()),
            "desk" => Ok(Self::desk()),
            _ => Err(GiltError::InvalidSpec(format!("unknown preset `{name}` (paper-table6, desk)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(GiltError::InvalidSpec(format!(
                "schema_version {} (this build reads {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.model.validate()?;
        let positive = [
            ("lr", self.lr >= 0.0),
            ("weight_decay", self.weight_decay >= 0.0),
            ("beta1", (0.0..1.0).contains(&self.beta1)),
            ("beta2", (0.0..1.0).contains(&self.beta2)),
            ("adam_eps", self.adam_eps > 0.0),
            ("epochs", self.epochs >= 1),
            ("episodes_per_level", self.episodes_per_level >= 1),
            ("query_size", self.query_size >= 1),
            ("neg_ratio", self.neg_ratio >= 1),
            ("levels", !self.levels.is_empty()),
            ("grad_clip", self.grad_clip.is_none_or(|c| c > 0.0)),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, ok)| !ok) {
            return Err(GiltError::InvalidSpec(format!("`{name}` is out of range")));
        }
        for l in &self.levels {
            if self.batch.get(*l) == 0 || self.loss_weights.get(*l) < 0.0 || self.n_way.get(*l) < 2 {
                return Err(GiltError::InvalidSpec(format!("{} batch/weight/n_way out of range", l.name())));
            }
        }
        ShotSchedule::new(self.start_shots, self.end_shots, self.epochs)?;
        for (name, p) in [("feat_drop", self.feat_drop), ("edge_drop", self.edge_drop)] {
            if !(0.0..1.0).contains(&p) {
                return Err(GiltError::InvalidSpec(format!("`{name}` must be in [0, 1)")));
            }
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.levels
            .iter()
            .map(|&l| self.episodes_per_level.div_ceil(self.batch.get(l)))
            .max()
            .unwrap_or(0)
    }

    /// Learning rate at global step `t` of `total`.
    pub fn lr_at(&self, t: usize, total: usize) -> f64 {
        let frac = t as f64 / total.max(1) as f64;
        match self.lr_schedule {
            LrSchedule::LinearDecay => self.lr * (1.0 - frac),
            LrSchedule::Cosine => self.lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()),
            LrSchedule::Warmup => {
                if t < self.warmup_steps {
                    self.lr * (t + 1) as f64 / self.warmup_steps as f64
                } else {
                    let rest = (total - self.warmup_steps.min(total)).max(1) as f64;
                    self.lr * (1.0 - (t - self.warmup_steps) as f64 / rest)
                }
            }
        }
    }

    fn hyper(&self, lr: f64) -> AdamHyper {
        AdamHyper {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
            optimizer: self.optimizer,
        }
    }
}

/// Per-epoch losses: per-level means over the epoch's episodes and their
/// weighted sum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochTelemetry {
    pub epoch: usize,
    pub l_node: Option<f64>,
    pub l_link: Option<f64>,
    pub l_graph: Option<f64>,
    pub l_total: f64,
    pub lr: f64,
    pub shots: usize,
}

impl EpochTelemetry {
    pub const CSV_HEADER: &'static str = "epoch,L_node,L_link,L_graph,L_total,lr,shots";

    pub fn csv_row(&self) -> String {
        let f = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.17e}"));
        format!(
            "{},{},{},{},{:.17e},{:.17e},{}",
            self.epoch,
            f(self.l_node),
            f(self.l_link),
            f(self.l_graph),
            self.l_total,
            self.lr,
            self.shots
        )
    }
}

pub fn telemetry_csv(rows: &[EpochTelemetry]) -> String {
    let mut s = String::from(EpochTelemetry::CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Aligns every dataset of the corpus once for training.
pub fn prepare_corpus(corpus: &Corpus, spec: &AlignSpec) -> Result<Vec<PreparedDataset>> {
    corpus.datasets().iter().map(|d| prepare(d.clone(), spec)).collect()
}

/// Items per class available to pre-training episodes (the train split
/// when one is assigned).
fn pool_counts(labels: &[u32], split: Option<&[Split]>) -> Vec<usize> {
    let n = labels.iter().max().map_or(0, |&m| m as usize + 1);
    let mut counts = vec![0; n];
    for (i, &c) in labels.iter().enumerate() {
        if split.is_none_or(|s| s[i] == Split::Train) {
            counts[c as usize] += 1;
        }
    }
    counts
}

/// Largest `(n, k)` not above the request such that `n` classes keep at
/// least one query item after `k` shots.
fn fit_episode(counts: &[usize], n_way: usize, k: usize) -> Option<(usize, usize)> {
    (1..=k).rev().find_map(|k| {
        let ok = counts.iter().filter(|&&c| c > k).count();
        (ok >= 2).then(|| (ok.min(n_way), k))
    })
}

fn sample_pretrain_episode(
    data: &PreparedDataset,
    level: TaskLevel,
    cfg: &TrainConfig,
    shots: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Episode> {
    let ds: &Dataset = &data.dataset;
    let q = Some(cfg.query_size);
    let e = match level {
        TaskLevel::Node => {
            let g = ds.graph();
            let labels = g.node_labels().ok_or_else(|| GiltError::Unsupported(format!("`{}` has no node labels", ds.name)))?;
            let (n, k) = fit_episode(&pool_counts(labels, g.node_split()), cfg.n_way.node, shots)
                .ok_or_else(|| GiltError::Insufficient(format!("`{}` cannot form a 2-way node episode", ds.name)))?;
            sample_node_episode(g, &ds.name, n, k, q, PoolPolicy::Pretrain, rng)?
        }
        TaskLevel::Graph => {
            let labels: Vec<u32> = ds.graphs().iter().map(|g| g.graph_label().unwrap_or(0)).collect();
            let (n, k) = fit_episode(&pool_counts(&labels, ds.graph_split()), cfg.n_way.graph, shots)
                .ok_or_else(|| GiltError::Insufficient(format!("`{}` cannot form a 2-way graph episode", ds.name)))?;
            sample_graph_episode(ds, n, k, q, PoolPolicy::Pretrain, rng)?
        }
        TaskLevel::Link => {
            let g = ds.graph();
            let train = g.edge_split().map_or(g.edge_count(), |s| s.iter().filter(|&&t| t == Split::Train).count());
            let k = shots.min(train.saturating_sub(1)).max(1);
            sample_link_episode(g, &ds.name, k, q, cfg.neg_ratio, PoolPolicy::Pretrain, rng)?
        }
    };
    augment(&e, cfg.feat_drop, cfg.edge_drop, rng)
}

struct Job {
    level: TaskLevel,
    dataset: usize,
    episode: Episode,
    dropout_seed: u64,
}

/// Training state: model, optimizer moments and telemetry so far.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub adam: AdamState,
    /// Number of completed epochs.
    pub epoch: usize,
    pub telemetry: Vec<EpochTelemetry>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::init(config.model.clone(), config.seed)?;
        Ok(Trainer { config, model, adam: AdamState::default(), epoch: 0, telemetry: Vec::new() })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        ck.config.validate()?;
        Ok(Trainer { config: ck.config, model: ck.model, adam: ck.adam, epoch: ck.epoch, telemetry: ck.telemetry })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            model: self.model.clone(),
            adam: self.adam.clone(),
            epoch: self.epoch,
            telemetry: self.telemetry.clone(),
        }
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    /// The sampling stream of an epoch depends only on `(seed, epoch)`, so a
    /// resumed run continues exactly where the original would have.
    fn epoch_rng(&self, epoch: usize) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.config.seed);
        r.set_stream(epoch as u64 + 1);
        r
    }

    fn draw_jobs(&self, corpus: &[PreparedDataset], shots: usize) -> Result<Vec<Vec<Job>>> {
        let cfg = &self.config;
        let mut rng = self.epoch_rng(self.epoch);
        let mut per_level = Vec::new();
        for &level in &cfg.levels {
            let eligible: Vec<usize> = (0..corpus.len()).filter(|&i| corpus[i].dataset.supports(level)).collect();
            if eligible.is_empty() {
                return Err(GiltError::Unsupported(format!("no corpus dataset supports {} tasks", level.name())));
            }
            let mut jobs = Vec::with_capacity(cfg.episodes_per_level);
            for _ in 0..cfg.episodes_per_level {
                let di = eligible[rng.random_range(0..eligible.len())];
                let episode = sample_pretrain_episode(&corpus[di], level, cfg, shots, &mut rng)?;
                jobs.push(Job { level, dataset: di, episode, dropout_seed: rng.random() });
            }
            per_level.push(jobs);
        }
        Ok(per_level)
    }

    /// Runs one epoch over `corpus`, which must be prepared with this
    /// model's alignment spec.
    pub fn run_epoch(&mut self, corpus: &[PreparedDataset]) -> Result<EpochTelemetry> {
        if self.is_done() {
            return Err(GiltError::InvalidSpec(format!("all {} epochs already run", self.config.epochs)));
        }
        let cfg = self.config.clone();
        let shots = ShotSchedule::new(cfg.start_shots, cfg.end_shots, cfg.epochs)?.shots_at(self.epoch);
        let jobs = self.draw_jobs(corpus, shots)?;
        let steps = cfg.steps_per_epoch();
        let total_steps = steps * cfg.epochs;
        let mut sums: BTreeMap<TaskLevel, (f64, usize)> = BTreeMap::new();
        let epoch_lr = cfg.lr_at(self.epoch * steps, total_steps);

        for s in 0..steps {
            let mut batch: Vec<&Job> = Vec::new();
            let mut counts: BTreeMap<TaskLevel, usize> = BTreeMap::new();
            for (li, &level) in cfg.levels.iter().enumerate() {
                let b = cfg.batch.get(level);
                let lo = (s * b).min(jobs[li].len());
                let hi = ((s + 1) * b).min(jobs[li].len());
                batch.extend(&jobs[li][lo..hi]);
                if hi > lo {
                    counts.insert(level, hi - lo);
                }
            }
            let model = &self.model;
            let results: Vec<Result<(f64, BTreeMap<String, Matrix>)>> = batch
                .par_iter()
                .map(|j| {
                    let mut r = ChaCha8Rng::seed_from_u64(j.dropout_seed);
                    episode_gradients(model, &corpus[j.dataset], &j.episode, Some(&mut r as &mut dyn RngCore))
                })
                .collect();

            let mut grads: BTreeMap<String, Matrix> = BTreeMap::new();
            for (j, r) in batch.iter().zip(results) {
                let (loss, g) = r.map_err(|e| match e {
                    GiltError::NonFinite(m) => GiltError::Numerical(format!("epoch {} step {s}: {m}", self.epoch)),
                    other => other,
                })?;
                let entry = sums.entry(j.level).or_insert((0.0, 0));
                entry.0 += loss;
                entry.1 += 1;
                let w = cfg.loss_weights.get(j.level) / counts[&j.level] as f64;
                for (name, gm) in g {
                    let scaled = gm.scale(w);
                    match grads.get_mut(&name) {
                        Some(acc) => acc.add_assign(&scaled),
                        None => {
                            grads.insert(name, scaled);
                        }
                    }
                }
            }
            if grads.values().any(|g| !g.is_finite()) {
                return Err(GiltError::Numerical(format!("non-finite gradient at epoch {} step {s}", self.epoch)));
            }
            if let Some(c) = cfg.grad_clip {
                clip_global_norm(&mut grads, c);
            }
            let lr = cfg.lr_at(self.epoch * steps + s, total_steps);
            adamw_step(&mut self.model.params, &grads, &mut self.adam, &cfg.hyper(lr));
        }

        let mean = |l: TaskLevel| sums.get(&l).map(|&(s, n)| s / n as f64);
        let (l_node, l_link, l_graph) = (mean(TaskLevel::Node), mean(TaskLevel::Link), mean(TaskLevel::Graph));
        let l_total = TaskLevel::ALL
            .iter()
            .filter_map(|&l| mean(l).map(|m| cfg.loss_weights.get(l) * m))
            .sum();
        let t = EpochTelemetry { epoch: self.epoch, l_node, l_link, l_graph, l_total, lr: epoch_lr, shots };
        self.epoch += 1;
        self.telemetry.push(t.clone());
        Ok(t)
    }

    /// Runs the remaining epochs, calling `on_epoch` after each.
    pub fn train(
        &mut self,
        corpus: &[PreparedDataset],
        mut on_epoch: impl FnMut(&Trainer, &EpochTelemetry) -> Result<()>,
    ) -> Result<()> {
        if self.config.preflight && self.epoch == 0 {
            let report = preflight_gradient_check()?;
            if !report.passed {
                return Err(GiltError::Numerical(format!(
                    "pre-flight gradient check failed: max relative error {:.3e} at {:?}",
                    report.max_rel_error, report.worst
                )));
            }
        }
        while !self.is_done() {
            let t = self.run_epoch(corpus)?;
            on_epoch(self, &t)?;
        }
        Ok(())
    }
}

/// Finite-difference check of the full episode loss on a tiny model
/// (d = 8, two encoder layers, one transformer layer, 2-way 2-shot, three
/// queries).
pub fn preflight_gradient_check() -> Result<GradCheckReport> {
    let g = make_synthetic(&SyntheticSpec {
        n_classes: 2,
        nodes_per_class: 8,
        intra_p: 0.4,
        inter_p: 0.1,
        feature_dim: 6,
        class_mean_separation: 1.5,
        noise_sd: 1.0,
        seed: 17,
    })?;
    let mut cfg = ModelConfig::tiny(8);
    cfg.align.mode = AlignMode::Pad;
    let data = prepare(Dataset::single("preflight", g)?, &cfg.align)?;
    let model = Model::init(cfg, 17)?;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let e = sample_node_episode(data.dataset.graph(), "preflight", 2, 2, Some(3), PoolPolicy::Pretrain, &mut rng)?;
    let (_, analytic) = episode_gradients(&model, &data, &e, None)?;
    grad_check(
        |p| {
            let m = Model { config: model.config.clone(), params: p.clone() };
            episode_loss(&m, &data, &e)
        },
        &model.params,
        &analytic,
        &GradCheckConfig::default(),
    )
}
