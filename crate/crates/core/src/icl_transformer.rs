//! Two-stage in-context transformer. Each layer runs support self-attention,
//! then query→support cross-attention with the same attention weights, then
//! one FFN applied to both streams. Pre-LayerNorm residual blocks:
//!
//! ```text
//! S' = S  + Attn(LN1 S,  LN1 S)
//! Q' = Q  + Attn(LN1 Q,  LN1 S')
//! X  ← X  + FFN(LN2 X)          for X in {S', Q'}
//! ```
//!
//! Queries attend only to support tokens, never to one another.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{GiltError, Result};
use crate::numerics::{Matrix, ParamStore, Tape, Var};
use crate::tokenizer::TokenSet;

pub const TRANSFORMER_LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub dropout: f64,
    /// Ablation: separate attention weights for the cross-attention stage.
    #[serde(default)]
    pub unshared_attention: bool,
    /// Start the attention output and second FFN weights at zero, so an
    /// untrained stack is the identity map. Other weights are drawn either way.
    #[serde(default)]
    pub zero_init_residual: bool,
}

impl TransformerConfig {
    pub fn validate(&self, width: usize) -> Result<()> {
        if self.heads == 0 || width % self.heads != 0 {
            return Err(GiltError::InvalidSpec(format!(
                "token width {width} is not divisible by {} heads",
                self.heads
            )));
        }
        if self.ffn_hidden == 0 {
            return Err(GiltError::InvalidSpec("ffn_hidden must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(GiltError::InvalidSpec(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

const ATTN: [&str; 8] = ["wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"];

fn name(l: usize, block: &str, p: &str) -> String {
    format!("tf.{l}.{block}.{p}")
}

fn uniform(rng: &mut dyn RngCore, rows: usize, cols: usize) -> Matrix {
    let a = 1.0 / (rows as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

fn init_attention(store: &mut ParamStore, l: usize, block: &str, m: usize, zero_out: bool, rng: &mut dyn RngCore) {
    for w in ["wq", "wk", "wv", "wo"] {
        let mut x = uniform(rng, m, m);
        if zero_out && w == "wo" {
            x = Matrix::zeros(m, m);
        }
        store.insert(name(l, block, w), x);
        store.insert(name(l, block, &format!("b{}", &w[1..])), Matrix::zeros(1, m));
    }
}

/// Adds transformer parameters for token width `m`.
pub fn init_params(store: &mut ParamStore, m: usize, cfg: &TransformerConfig, rng: &mut dyn RngCore) -> Result<()> {
    cfg.validate(m)?;
    for l in 0..cfg.layers {
        for ln in ["ln1", "ln2"] {
            store.insert(name(l, ln, "gamma"), Matrix::filled(1, m, 1.0));
            store.insert(name(l, ln, "beta"), Matrix::zeros(1, m));
        }
        init_attention(store, l, "attn", m, cfg.zero_init_residual, rng);
        if cfg.unshared_attention {
            init_attention(store, l, "xattn", m, cfg.zero_init_residual, rng);
        }
        store.insert(name(l, "ffn", "w1"), uniform(rng, m, cfg.ffn_hidden));
        store.insert(name(l, "ffn", "b1"), Matrix::zeros(1, cfg.ffn_hidden));
        let w2 = uniform(rng, cfg.ffn_hidden, m);
        let w2 = if cfg.zero_init_residual { Matrix::zeros(cfg.ffn_hidden, m) } else { w2 };
        store.insert(name(l, "ffn", "w2"), w2);
        store.insert(name(l, "ffn", "b2"), Matrix::zeros(1, m));
    }
    Ok(())
}

/// Scalars in one layer: one attention set, one FFN, two LayerNorm pairs.
pub fn layer_param_count(m: usize, cfg: &TransformerConfig) -> usize {
    let attn = 4 * (m * m + m);
    let ffn = m * cfg.ffn_hidden + cfg.ffn_hidden + cfg.ffn_hidden * m + m;
    let sets = if cfg.unshared_attention { 2 } else { 1 };
    sets * attn + ffn + 4 * m
}

struct Ctx<'a, 'r> {
    store: &'a ParamStore,
    heads: usize,
    dropout: f64,
    rng: Option<&'r mut dyn RngCore>,
}

impl Ctx<'_, '_> {
    fn p(&self, tape: &mut Tape, n: &str) -> Result<Var> {
        Ok(tape.param(n, self.store.get(n)?))
    }

    fn drop(&mut self, tape: &mut Tape, x: Var) -> Var {
        match self.rng.as_deref_mut() {
            Some(rng) if self.dropout > 0.0 => tape.dropout(x, self.dropout, rng),
            _ => x,
        }
    }

    fn layer_norm(&self, tape: &mut Tape, x: Var, l: usize, ln: &str) -> Result<Var> {
        let g = self.p(tape, &name(l, ln, "gamma"))?;
        let b = self.p(tape, &name(l, ln, "beta"))?;
        let n = tape.layer_norm_rows(x, TRANSFORMER_LN_EPS);
        let n = tape.mul_row(n, g);
        Ok(tape.add_row(n, b))
    }

    fn affine(&self, tape: &mut Tape, x: Var, w: &str, b: &str) -> Result<Var> {
        let w = self.p(tape, w)?;
        let b = self.p(tape, b)?;
        let y = tape.matmul(x, w);
        Ok(tape.add_row(y, b))
    }

    fn attention(&mut self, tape: &mut Tape, q_in: Var, kv_in: Var, l: usize, block: &str) -> Result<Var> {
        let n: Vec<String> = ATTN.iter().map(|p| name(l, block, p)).collect();
        let q = self.affine(tape, q_in, &n[0], &n[1])?;
        let k = self.affine(tape, kv_in, &n[2], &n[3])?;
        let v = self.affine(tape, kv_in, &n[4], &n[5])?;
        let m = tape.shape(q).1;
        let dh = m / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dh, dh);
            let kh = tape.slice_cols(k, h * dh, dh);
            let vh = tape.slice_cols(v, h * dh, dh);
            let scores = tape.matmul_nt(qh, kh);
            let scores = tape.scale(scores, scale);
            let weights = tape.softmax_rows(scores);
            let weights = self.drop(tape, weights);
            outs.push(tape.matmul(weights, vh));
        }
        let cat = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs) };
        self.affine(tape, cat, &n[6], &n[7])
    }

    fn ffn(&mut self, tape: &mut Tape, x: Var, l: usize) -> Result<Var> {
        let normed = self.layer_norm(tape, x, l, "ln2")?;
        let h = self.affine(tape, normed, &name(l, "ffn", "w1"), &name(l, "ffn", "b1"))?;
        let h = tape.relu(h);
        let h = self.drop(tape, h);
        let y = self.affine(tape, h, &name(l, "ffn", "w2"), &name(l, "ffn", "b2"))?;
        Ok(tape.add(x, y))
    }
}

/// Records the full stack on `tape`. Dropout is active only when `rng` is
/// given (train mode).
pub fn forward_on_tape(
    tape: &mut Tape,
    support: Var,
    query: Var,
    store: &ParamStore,
    cfg: &TransformerConfig,
    rng: Option<&mut dyn RngCore>,
) -> Result<(Var, Var)> {
    let m = tape.shape(support).1;
    if tape.shape(query).1 != m {
        return Err(GiltError::Shape(format!("query width {} vs support {m}", tape.shape(query).1)));
    }
    if cfg.layers == 0 {
        return Ok((support, query));
    }
    cfg.validate(m)?;
    if tape.shape(support).0 == 0 {
        return Err(GiltError::Insufficient("no support tokens to attend to".into()));
    }
    let mut ctx = Ctx { store, heads: cfg.heads, dropout: cfg.dropout, rng };
    let (mut s, mut q) = (support, query);
    for l in 0..cfg.layers {
        if store.get(&name(l, "attn", "wq"))?.rows() != m {
            return Err(GiltError::Shape(format!("layer {l} width does not match tokens of width {m}")));
        }
        let sn = ctx.layer_norm(tape, s, l, "ln1")?;
        let sa = ctx.attention(tape, sn, sn, l, "attn")?;
        s = tape.add(s, sa);

        let qn = ctx.layer_norm(tape, q, l, "ln1")?;
        let kv = ctx.layer_norm(tape, s, l, "ln1")?;
        let cross = if cfg.unshared_attention { "xattn" } else { "attn" };
        let qa = ctx.attention(tape, qn, kv, l, cross)?;
        q = tape.add(q, qa);

        s = ctx.ffn(tape, s, l)?;
        q = ctx.ffn(tape, q, l)?;
    }
    Ok((s, q))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContextualEmbeddings {
    pub support: Matrix,
    pub query: Matrix,
}

/// Runs the stack on a token set without recording gradients for later use.
pub fn forward(
    tokens: &TokenSet,
    store: &ParamStore,
    cfg: &TransformerConfig,
    rng: Option<&mut dyn RngCore>,
) -> Result<ContextualEmbeddings> {
    let mut tape = Tape::new();
    let s = tape.constant(tokens.support.clone());
    let q = tape.constant(tokens.query.clone());
    let (s, q) = forward_on_tape(&mut tape, s, q, store, cfg, rng)?;
    let out = ContextualEmbeddings { support: tape.value(s).clone(), query: tape.value(q).clone() };
    if !out.support.is_finite() || !out.query.is_finite() {
        return Err(GiltError::NonFinite("transformer output".into()));
    }
    Ok(out)
}
