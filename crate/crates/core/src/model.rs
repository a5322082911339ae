//! The assembled model: aligned features → encoder → tokens → transformer →
//! prototypical head, recorded on one tape per episode.

use std::collections::{BTreeMap, HashSet};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::episode_sampler::{Episode, ItemRef};
use crate::error::{GiltError, Result};
use crate::feature_align::{align, AlignMode, AlignSpec, AlignedFeatures, CONSTANT_SD};
use crate::graph_store::{Dataset, Graph, TaskLevel};
use crate::icl_transformer::{self, TransformerConfig};
use crate::numerics::{Matrix, ParamStore, Tape, Var};
use crate::proto_head::{self, EpisodeResult, HeadMode};
use crate::struct_encoder::{self, EncoderConfig, EncoderVariant, NormalizedAdjacency};
use crate::tokenizer::{build_tokens_on_tape, item_reprs_on_tape, Embedded, TokenSet};

pub const PROJECTION: &str = "align.proj.w";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub align: AlignSpec,
    pub encoder: EncoderConfig,
    pub transformer: TransformerConfig,
    pub head: HeadMode,
    pub temperature: f64,
}

impl ModelConfig {
    /// Item width `d`; tokens are `2d`.
    pub fn item_dim(&self) -> usize {
        self.align.unified_dim
    }

    pub fn validate(&self) -> Result<()> {
        self.align.validate()?;
        self.transformer.validate(2 * self.item_dim())?;
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(GiltError::InvalidSpec(format!("temperature {} must be > 0", self.temperature)));
        }
        Ok(())
    }

    /// Small configuration used by gradient checks and unit tests.
    pub fn tiny(d: usize) -> Self {
        ModelConfig {
            align: AlignSpec::pad(d),
            encoder: EncoderConfig { layers: 2, variant: EncoderVariant::Linear },
            transformer: TransformerConfig {
                layers: 1,
                heads: 2,
                ffn_hidden: 2 * d,
                dropout: 0.0,
                unshared_attention: false,
                zero_init_residual: false,
            },
            head: HeadMode::ClassSpace,
            temperature: proto_head::DEFAULT_TEMPERATURE,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.item_dim();
        let mut params = ParamStore::new();
        if config.align.mode == AlignMode::LearnableProjection {
            let k = config.align.intermediate_dim;
            let a = 1.0 / (k as f64).sqrt();
            let data = (0..k * d).map(|_| rand::Rng::random_range(&mut rng, -a..a)).collect();
            params.insert(PROJECTION, Matrix::from_vec(k, d, data)?);
        }
        struct_encoder::init_params(&mut params, d, &config.encoder);
        icl_transformer::init_params(&mut params, 2 * d, &config.transformer, &mut rng)?;
        Ok(Model { config, params })
    }
}

/// Eval-time architectural switches that need no extra parameters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Ablation {
    /// Run only the first `n` encoder layers (`Some(0)` drops the encoder).
    pub encoder_layers: Option<usize>,
    /// Run only the first `n` transformer layers (`Some(0)` drops it).
    pub transformer_layers: Option<usize>,
    pub head: Option<HeadMode>,
}

impl Ablation {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if let Some(l) = self.encoder_layers {
            if l > cfg.encoder.layers {
                return Err(GiltError::InvalidSpec(format!(
                    "{l} encoder layers requested, checkpoint has {}",
                    cfg.encoder.layers
                )));
            }
        }
        if let Some(l) = self.transformer_layers {
            if l > cfg.transformer.layers {
                return Err(GiltError::InvalidSpec(format!(
                    "{l} transformer layers requested, checkpoint has {}",
                    cfg.transformer.layers
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PreparedGraph {
    pub features: Matrix,
    pub adjacency: NormalizedAdjacency,
}

/// A dataset with features aligned and full adjacencies normalized once.
#[derive(Clone, Debug)]
pub struct PreparedDataset {
    pub dataset: Dataset,
    pub graphs: Vec<PreparedGraph>,
    pub alignment: AlignedFeatures,
}

/// Aligns a dataset. A single graph is aligned on its own; the graphs of a
/// collection share one feature space, so their stacked nodes are aligned
/// together.
pub fn prepare(dataset: Dataset, spec: &AlignSpec) -> Result<PreparedDataset> {
    let parts: Vec<&Matrix> = dataset.graphs().iter().map(|g| g.features()).collect();
    let stacked = if parts.len() == 1 { parts[0].clone() } else { Matrix::vconcat(&parts) };
    let alignment = align(&stacked, spec)?;
    let mut graphs = Vec::with_capacity(parts.len());
    let mut offset = 0;
    for g in dataset.graphs() {
        let n = g.node_count();
        let idx: Vec<usize> = (offset..offset + n).collect();
        offset += n;
        graphs.push(PreparedGraph {
            features: alignment.matrix.select_rows(&idx),
            adjacency: struct_encoder::normalize_adjacency(g),
        });
    }
    Ok(PreparedDataset { dataset, graphs, alignment })
}

impl PreparedDataset {
    pub fn name(&self) -> &str {
        &self.dataset.name
    }
}

fn graph_adjacency(g: &Graph, prepared: &PreparedGraph, hidden: &HashSet<(u32, u32)>, keep: Option<&[bool]>) -> NormalizedAdjacency {
    if hidden.is_empty() && keep.is_none() {
        return prepared.adjacency.clone();
    }
    let mask: Vec<bool> = g
        .edges()
        .iter()
        .enumerate()
        .map(|(e, edge)| !hidden.contains(edge) && keep.is_none_or(|k| k[e]))
        .collect();
    struct_encoder::normalize_adjacency_masked(g, &mask)
}

/// Node embeddings of graph `gi` on the tape, applying the episode's
/// hidden edges and augmentation masks.
fn embed_graph(
    tape: &mut Tape,
    model: &Model,
    data: &PreparedDataset,
    gi: usize,
    e: &Episode,
    hidden: &HashSet<(u32, u32)>,
    encoder_layers: usize,
) -> Result<Var> {
    let g = &data.dataset.graphs()[gi];
    let pg = &data.graphs[gi];
    let mut x = pg.features.clone();
    let mut edge_keep = None;
    if let Some(aug) = &e.augmentation {
        if aug.feat_drop > 0.0 {
            let (n, w) = x.shape();
            let mask = aug.feature_keep_mask(gi, n, w);
            for (v, keep) in x.as_mut_slice().iter_mut().zip(mask) {
                if !keep {
                    *v = 0.0;
                }
            }
        }
        if aug.edge_drop > 0.0 {
            edge_keep = Some(aug.edge_keep_mask(gi, g.edge_count()));
        }
    }
    let adj = graph_adjacency(g, pg, hidden, edge_keep.as_deref());
    let mut xv = tape.constant(x);
    if model.config.align.mode == AlignMode::LearnableProjection {
        let w = tape.param(PROJECTION, model.params.get(PROJECTION)?);
        let projected = tape.matmul(xv, w);
        xv = tape.standardize_cols(projected, CONSTANT_SD);
    }
    struct_encoder::encode_on_tape(tape, xv, &adj, &model.params, &model.config.encoder, encoder_layers)
}

/// Everything the head produced for one episode, still on the tape.
pub struct EpisodeVars {
    pub support_tokens: Var,
    pub query_tokens: Var,
    pub probs: Var,
    pub scores: Var,
}

/// Records one episode end to end. Dropout is active only when `rng` is
/// given.
pub fn episode_on_tape(
    tape: &mut Tape,
    model: &Model,
    data: &PreparedDataset,
    e: &Episode,
    ablation: &Ablation,
    rng: Option<&mut dyn RngCore>,
) -> Result<EpisodeVars> {
    ablation.validate(&model.config)?;
    let cfg = &model.config;
    let d = cfg.item_dim();
    let enc_layers = ablation.encoder_layers.unwrap_or(cfg.encoder.layers);
    let hidden: HashSet<(u32, u32)> = e.hidden_edges.iter().copied().collect();
    let support_items: Vec<ItemRef> = e.support.iter().map(|s| s.item).collect();

    let (s_repr, q_repr) = match e.level {
        TaskLevel::Node | TaskLevel::Link => {
            let h = embed_graph(tape, model, data, 0, e, &hidden, enc_layers)?;
            let emb = Embedded::Nodes(h);
            (
                item_reprs_on_tape(tape, &emb, &support_items, d)?,
                item_reprs_on_tape(tape, &emb, &e.query, d)?,
            )
        }
        TaskLevel::Graph => {
            let mut ids: Vec<u32> = support_items.iter().chain(&e.query).filter_map(|i| match i {
                ItemRef::Graph(g) => Some(*g),
                _ => None,
            }).collect();
            ids.sort_unstable();
            ids.dedup();
            let mut map = BTreeMap::new();
            for gi in ids {
                if gi as usize >= data.graphs.len() {
                    return Err(GiltError::Shape(format!("graph {gi} not in `{}`", data.name())));
                }
                map.insert(gi, embed_graph(tape, model, data, gi as usize, e, &hidden, enc_layers)?);
            }
            let emb = Embedded::Graphs(&map);
            (
                item_reprs_on_tape(tape, &emb, &support_items, d)?,
                item_reprs_on_tape(tape, &emb, &e.query, d)?,
            )
        }
    };
    let labels = e.support_labels();
    let tokens = build_tokens_on_tape(tape, s_repr, &labels, e.n_way, q_repr)?;
    let mut tcfg = cfg.transformer.clone();
    if let Some(l) = ablation.transformer_layers {
        tcfg.layers = l;
    }
    let (s, q) = icl_transformer::forward_on_tape(tape, tokens.support, tokens.query, &model.params, &tcfg, rng)?;
    let head = proto_head::predict_on_tape(tape, s, q, &labels, e.n_way, ablation.head.unwrap_or(cfg.head), cfg.temperature)?;
    Ok(EpisodeVars { support_tokens: tokens.support, query_tokens: tokens.query, probs: head.probs, scores: head.scores })
}

fn query_labels(e: &Episode) -> Vec<usize> {
    e.query_labels.iter().map(|&c| c as usize).collect()
}

/// Episode loss and its gradient for every parameter the episode touched.
pub fn episode_gradients(
    model: &Model,
    data: &PreparedDataset,
    e: &Episode,
    rng: Option<&mut dyn RngCore>,
) -> Result<(f64, BTreeMap<String, Matrix>)> {
    let mut tape = Tape::new();
    let out = episode_on_tape(&mut tape, model, data, e, &Ablation::default(), rng)?;
    let loss = proto_head::loss_on_tape(&mut tape, out.probs, &query_labels(e))?;
    let value = tape.value(loss).scalar_value();
    if !value.is_finite() {
        return Err(GiltError::NonFinite(format!("episode loss on `{}`", e.source)));
    }
    let grads = tape.backward(loss);
    Ok((value, tape.param_grads(&grads)))
}

/// Loss only, for finite-difference checks.
pub fn episode_loss(model: &Model, data: &PreparedDataset, e: &Episode) -> Result<f64> {
    let mut tape = Tape::new();
    let out = episode_on_tape(&mut tape, model, data, e, &Ablation::default(), None)?;
    let loss = proto_head::loss_on_tape(&mut tape, out.probs, &query_labels(e))?;
    Ok(tape.value(loss).scalar_value())
}

/// Inference-mode prediction (no dropout, no gradients kept).
pub fn predict_episode(model: &Model, data: &PreparedDataset, e: &Episode, ablation: &Ablation) -> Result<EpisodeResult> {
    let mut tape = Tape::new();
    let out = episode_on_tape(&mut tape, model, data, e, ablation, None)?;
    let probs = tape.value(out.probs).clone();
    let scores = tape.value(out.scores).clone();
    if !probs.is_finite() {
        return Err(GiltError::NonFinite(format!("predictions on `{}`", e.source)));
    }
    let predicted = (0..probs.rows())
        .map(|r| {
            let row = probs.row(r);
            (0..row.len()).fold(0, |b, c| if row[c] > row[b] { c } else { b })
        })
        .collect();
    let zero_q: Vec<usize> = (0..scores.rows()).filter(|&r| scores.row(r).iter().all(|&s| s == 0.0)).collect();
    Ok(EpisodeResult { probs, scores, predicted, uniform_fallback: zero_q })
}

/// The episode's token set as fed to the transformer.
pub fn tokenize_episode(model: &Model, data: &PreparedDataset, e: &Episode) -> Result<TokenSet> {
    let mut tape = Tape::new();
    let out = episode_on_tape(&mut tape, model, data, e, &Ablation::default(), None)?;
    Ok(TokenSet {
        n_way: e.n_way,
        k_shot: e.k_shot,
        support: tape.value(out.support_tokens).clone(),
        query: tape.value(out.query_tokens).clone(),
        support_classes: e.support_labels(),
        degenerate: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episode_sampler::{augment, sample_graph_episode, sample_link_episode, sample_node_episode, PoolPolicy};
    use crate::graph_store::{make_graph_classification_corpus, make_synthetic, GraphCorpusSpec, SyntheticSpec};
    use crate::numerics::{grad_check, GradCheckConfig};

    fn node_data(d: usize) -> PreparedDataset {
        let g = make_synthetic(&SyntheticSpec {
            n_classes: 3,
            nodes_per_class: 6,
            intra_p: 0.5,
            inter_p: 0.1,
            feature_dim: 5,
            class_mean_separation: 2.0,
            noise_sd: 1.0,
            seed: 1,
        })
        .unwrap();
        prepare(Dataset::single("toy", g).unwrap(), &AlignSpec::pad(d)).unwrap()
    }

    fn check(model: &Model, data: &PreparedDataset, e: &Episode) {
        let (_, analytic) = episode_gradients(model, data, e, None).unwrap();
        let report = grad_check(
            |p| {
                let m = Model { config: model.config.clone(), params: p.clone() };
                episode_loss(&m, data, e)
            },
            &model.params,
            &analytic,
            &GradCheckConfig { max_coords_per_param: Some(6), ..GradCheckConfig::default() },
        )
        .unwrap();
        assert!(report.passed, "{:?}", report.worst);
    }

    #[test]
    fn full_episode_gradients_match_finite_differences() {
        let data = node_data(4);
        let model = Model::init(ModelConfig::tiny(4), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let e = sample_node_episode(data.dataset.graph(), "toy", 2, 2, Some(3), PoolPolicy::Pretrain, &mut rng).unwrap();
        check(&model, &data, &e);
    }

    #[test]
    fn projection_unshared_and_nonlinear_variants_differentiate() {
        let mut cfg = ModelConfig::tiny(4);
        cfg.align.mode = AlignMode::LearnableProjection;
        cfg.align.intermediate_dim = 3;
        cfg.encoder.variant = EncoderVariant::Nonlinear;
        cfg.transformer.unshared_attention = true;
        let g = node_data(4).dataset;
        let data = prepare(g, &cfg.align).unwrap();
        let model = Model::init(cfg, 5).unwrap();
        assert!(model.params.contains(PROJECTION) && model.params.contains("tf.0.xattn.wq"));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let e = sample_node_episode(data.dataset.graph(), "toy", 3, 1, Some(4), PoolPolicy::Pretrain, &mut rng).unwrap();
        check(&model, &data, &e);
    }

    #[test]
    fn link_and_graph_episodes_run_and_differentiate() {
        let data = node_data(4);
        let model = Model::init(ModelConfig::tiny(4), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let e = sample_link_episode(data.dataset.graph(), "toy", 2, Some(4), 1, PoolPolicy::Pretrain, &mut rng).unwrap();
        check(&model, &data, &e);

        let ds = make_graph_classification_corpus(
            "gc",
            &GraphCorpusSpec { n_classes: 2, graphs_per_class: 4, nodes_per_graph: 5, feature_dim: 3, seed: 2 },
        )
        .unwrap();
        let data = prepare(ds, &AlignSpec::pad(4)).unwrap();
        let e = sample_graph_episode(&data.dataset, 2, 2, Some(2), PoolPolicy::Pretrain, &mut rng).unwrap();
        check(&model, &data, &e);
    }

    #[test]
    fn hidden_edges_and_augmentation_change_embeddings_only_when_set() {
        let data = node_data(4);
        let model = Model::init(ModelConfig::tiny(4), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let e = sample_node_episode(data.dataset.graph(), "toy", 2, 2, Some(3), PoolPolicy::Pretrain, &mut rng).unwrap();
        let base = predict_episode(&model, &data, &e, &Ablation::default()).unwrap();
        let same = augment(&e, 0.0, 0.0, &mut rng).unwrap();
        assert_eq!(predict_episode(&model, &data, &same, &Ablation::default()).unwrap(), base);
        let aug = augment(&e, 0.3, 0.3, &mut rng).unwrap();
        let moved = predict_episode(&model, &data, &aug, &Ablation::default()).unwrap();
        assert!(moved.probs.max_abs_diff(&base.probs) > 1e-9);
        let mut hid = e.clone();
        hid.hidden_edges = data.dataset.graph().edges()[..5].to_vec();
        let moved = predict_episode(&model, &data, &hid, &Ablation::default()).unwrap();
        assert!(moved.probs.max_abs_diff(&base.probs) > 1e-9);
    }

    #[test]
    fn ablation_bounds_checked() {
        let model = Model::init(ModelConfig::tiny(4), 1).unwrap();
        let a = Ablation { encoder_layers: Some(3), ..Ablation::default() };
        assert!(a.validate(&model.config).is_err());
        let a = Ablation { transformer_layers: Some(0), encoder_layers: Some(0), head: Some(HeadMode::FullToken) };
        assert!(a.validate(&model.config).is_ok());
    }

    #[test]
    fn tokens_have_zero_query_class_space() {
        let data = node_data(4);
        let model = Model::init(ModelConfig::tiny(4), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let e = sample_node_episode(data.dataset.graph(), "toy", 3, 2, Some(5), PoolPolicy::Pretrain, &mut rng).unwrap();
        let t = tokenize_episode(&model, &data, &e).unwrap();
        assert_eq!(t.support.cols(), 8);
        for r in 0..t.query.rows() {
            assert!(t.query.row(r)[4..].iter().all(|&x| x.to_bits() == 0));
        }
    }
}
