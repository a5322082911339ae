//! Tuning-free prototypical prediction on contextual embeddings.

use serde::{Deserialize, Serialize};

use crate::error::{GiltError, Result};
use crate::icl_transformer::ContextualEmbeddings;
use crate::numerics::{softmax_in_place, Matrix, Tape, Var, ZERO_NORM};

pub const DEFAULT_TEMPERATURE: f64 = 10.0;
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadMode {
    /// Compare only the class-space (second) half of each embedding.
    ClassSpace,
    /// Ablation: compare whole embeddings.
    FullToken,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    /// `|Q| × N`, rows sum to one.
    pub probs: Matrix,
    /// Raw cosine scores, `|Q| × N`.
    pub scores: Matrix,
    pub predicted: Vec<usize>,
    /// Queries that fell back to a uniform distribution because both the
    /// query slice and every prototype were zero.
    pub uniform_fallback: Vec<usize>,
}

pub struct HeadVars {
    pub scores: Var,
    pub probs: Var,
}

fn members(labels: &[usize], n_way: usize) -> Result<Vec<Vec<usize>>> {
    if n_way < 2 {
        return Err(GiltError::InvalidSpec(format!("need at least 2 classes, got {n_way}")));
    }
    let mut m = vec![Vec::new(); n_way];
    for (i, &c) in labels.iter().enumerate() {
        if c >= n_way {
            return Err(GiltError::Shape(format!("support label {c} outside 0..{n_way}")));
        }
        m[c].push(i);
    }
    if let Some(c) = m.iter().position(|v| v.is_empty()) {
        return Err(GiltError::Insufficient(format!("class {c} has no support rows")));
    }
    Ok(m)
}

/// Records scoring on `tape`: prototypes are plain class means of the
/// compared slice, scores are cosines, probabilities `softmax(T·cos)`.
pub fn predict_on_tape(
    tape: &mut Tape,
    support: Var,
    query: Var,
    labels: &[usize],
    n_way: usize,
    mode: HeadMode,
    temperature: f64,
) -> Result<HeadVars> {
    let m = tape.shape(support).1;
    if tape.shape(query).1 != m || tape.shape(support).0 != labels.len() {
        return Err(GiltError::Shape("support/query/labels disagree".into()));
    }
    let groups = members(labels, n_way)?;
    let (s, q) = match mode {
        HeadMode::ClassSpace => {
            if m % 2 != 0 {
                return Err(GiltError::Shape(format!("odd embedding width {m}")));
            }
            (tape.slice_cols(support, m / 2, m / 2), tape.slice_cols(query, m / 2, m / 2))
        }
        HeadMode::FullToken => (support, query),
    };
    let protos: Vec<Var> = groups
        .iter()
        .map(|idx| {
            let rows = tape.gather_rows(s, idx);
            tape.mean_rows(rows)
        })
        .collect();
    let protos = tape.concat_rows(&protos);
    let scores = tape.cosine_rows(q, protos);
    let logits = tape.scale(scores, temperature);
    let probs = tape.softmax_rows(logits);
    Ok(HeadVars { scores, probs })
}

/// Mean negative log-probability of the true classes, probabilities
/// clamped below at [`PROB_FLOOR`].
pub fn loss_on_tape(tape: &mut Tape, probs: Var, labels: &[usize]) -> Result<Var> {
    let (q, n) = tape.shape(probs);
    if labels.len() != q || q == 0 {
        return Err(GiltError::Shape(format!("{} labels for {q} queries", labels.len())));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= n) {
        return Err(GiltError::Shape(format!("label {l} outside 0..{n}")));
    }
    let picked = tape.pick_per_row(probs, labels);
    let logs = tape.log_clamped(picked, PROB_FLOOR);
    let mean = tape.mean(logs);
    Ok(tape.scale(mean, -1.0))
}

fn row_norm(r: &[f64]) -> f64 {
    r.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn predict(
    ctx: &ContextualEmbeddings,
    labels: &[usize],
    n_way: usize,
    mode: HeadMode,
    temperature: f64,
) -> Result<EpisodeResult> {
    let mut tape = Tape::new();
    let s = tape.constant(ctx.support.clone());
    let q = tape.constant(ctx.query.clone());
    let h = predict_on_tape(&mut tape, s, q, labels, n_way, mode, temperature)?;
    let probs = tape.value(h.probs).clone();
    let scores = tape.value(h.scores).clone();
    let predicted = (0..probs.rows())
        .map(|r| {
            let row = probs.row(r);
            (0..row.len()).fold(0, |best, c| if row[c] > row[best] { c } else { best })
        })
        .collect();

    let m = ctx.support.cols();
    let start = if mode == HeadMode::ClassSpace { m / 2 } else { 0 };
    let mut proto_zero = true;
    for idx in members(labels, n_way)? {
        let mut mean = vec![0.0; m - start];
        for &i in &idx {
            for (a, b) in mean.iter_mut().zip(&ctx.support.row(i)[start..]) {
                *a += b / idx.len() as f64;
            }
        }
        proto_zero &= row_norm(&mean) < ZERO_NORM;
    }
    let uniform_fallback = if proto_zero {
        (0..ctx.query.rows()).filter(|&r| row_norm(&ctx.query.row(r)[start..]) < ZERO_NORM).collect()
    } else {
        Vec::new()
    };
    Ok(EpisodeResult { probs, scores, predicted, uniform_fallback })
}

pub fn episode_loss(result: &EpisodeResult, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(result.probs.clone());
    let l = loss_on_tape(&mut tape, p, labels)?;
    Ok(tape.value(l).scalar_value())
}

/// `softmax(temperature · scores)` on plain numbers.
pub fn probabilities(scores: &[f64], temperature: f64) -> Vec<f64> {
    let mut p: Vec<f64> = scores.iter().map(|s| s * temperature).collect();
    softmax_in_place(&mut p);
    p
}
