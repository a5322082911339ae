//! Asymmetric support/query tokens. A support token is `[h_i ‖ p_{y_i}]`,
//! its item representation followed by the L2-normalized prototype of its
//! class; a query token is `[h_j ‖ 0]`. Width is `2d` whatever `N`, `K` or
//! `|Q|` are.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::episode_sampler::ItemRef;
use crate::error::{GiltError, Result};
use crate::numerics::{Matrix, Tape, Var, ZERO_NORM};

/// Where item representations are read from.
pub enum Embedded<'a> {
    /// Node embeddings of the single graph a node or link episode lives on.
    Nodes(Var),
    /// Node embeddings per graph index, for graph episodes.
    Graphs(&'a BTreeMap<u32, Var>),
}

/// Representations of `items`, one row each: node → `H[v]`,
/// link → `H[u] ⊙ H[v]`, graph → mean of the graph's node rows.
pub fn item_reprs_on_tape(tape: &mut Tape, emb: &Embedded, items: &[ItemRef], d: usize) -> Result<Var> {
    if items.is_empty() {
        return Ok(tape.constant(Matrix::zeros(0, d)));
    }
    match emb {
        Embedded::Nodes(h) => {
            let n = tape.shape(*h).0;
            let check = |v: u32| {
                if (v as usize) < n {
                    Ok(v as usize)
                } else {
                    Err(GiltError::Shape(format!("item refers to node {v} of a {n}-node graph")))
                }
            };
            if items.iter().all(|i| matches!(i, ItemRef::Node(_))) {
                let idx = items
                    .iter()
                    .map(|i| match i {
                        ItemRef::Node(v) => check(*v),
                        _ => unreachable!(),
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(tape.gather_rows(*h, &idx))
            } else if items.iter().all(|i| matches!(i, ItemRef::Link(..))) {
                let mut us = Vec::with_capacity(items.len());
                let mut vs = Vec::with_capacity(items.len());
                for i in items {
                    if let ItemRef::Link(u, v) = i {
                        us.push(check(*u)?);
                        vs.push(check(*v)?);
                    }
                }
                let hu = tape.gather_rows(*h, &us);
                let hv = tape.gather_rows(*h, &vs);
                Ok(tape.mul(hu, hv))
            } else {
                Err(GiltError::Shape("graph item against node embeddings, or mixed item kinds".into()))
            }
        }
        Embedded::Graphs(map) => {
            let mut rows = Vec::with_capacity(items.len());
            for i in items {
                let ItemRef::Graph(g) = i else {
                    return Err(GiltError::Shape("node or link item against per-graph embeddings".into()));
                };
                let h = map
                    .get(g)
                    .ok_or_else(|| GiltError::Shape(format!("no embeddings for graph {g}")))?;
                rows.push(tape.mean_rows(*h));
            }
            Ok(tape.concat_rows(&rows))
        }
    }
}

/// Token matrices recorded on a tape.
#[derive(Clone, Debug)]
pub struct TokenVars {
    pub support: Var,
    pub query: Var,
    /// Classes whose support mean had (near) zero norm; their prototype is 0.
    pub degenerate: Vec<usize>,
}

fn class_members(labels: &[usize], n_way: usize) -> Result<Vec<Vec<usize>>> {
    let mut members = vec![Vec::new(); n_way];
    for (i, &c) in labels.iter().enumerate() {
        if c >= n_way {
            return Err(GiltError::Shape(format!("support label {c} outside 0..{n_way}")));
        }
        members[c].push(i);
    }
    if let Some(c) = members.iter().position(|m| m.is_empty()) {
        return Err(GiltError::Insufficient(format!("class {c} has no support items")));
    }
    Ok(members)
}

/// Builds support and query tokens from representation rows.
pub fn build_tokens_on_tape(
    tape: &mut Tape,
    support: Var,
    labels: &[usize],
    n_way: usize,
    query: Var,
) -> Result<TokenVars> {
    let (s, d) = tape.shape(support);
    if s != labels.len() {
        return Err(GiltError::Shape(format!("{s} support rows, {} labels", labels.len())));
    }
    if tape.shape(query).1 != d {
        return Err(GiltError::Shape(format!("query width {} vs support {d}", tape.shape(query).1)));
    }
    let members = class_members(labels, n_way)?;
    let mut means = Vec::with_capacity(n_way);
    let mut degenerate = Vec::new();
    for (c, idx) in members.iter().enumerate() {
        let rows = tape.gather_rows(support, idx);
        let mean = tape.mean_rows(rows);
        let norm = tape.value(mean).as_slice().iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < ZERO_NORM {
            degenerate.push(c);
        }
        means.push(mean);
    }
    let means = tape.concat_rows(&means);
    let protos = tape.l2_normalize_rows(means);
    let per_item = tape.gather_rows(protos, labels);
    let support_tokens = tape.concat_cols(&[support, per_item]);
    let zeros = tape.constant(Matrix::zeros(tape.shape(query).0, d));
    let query_tokens = tape.concat_cols(&[query, zeros]);
    Ok(TokenVars { support: support_tokens, query: query_tokens, degenerate })
}

/// Concrete token set for one episode.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSet {
    pub n_way: usize,
    pub k_shot: usize,
    pub support: Matrix,
    pub query: Matrix,
    pub support_classes: Vec<usize>,
    pub degenerate: Vec<usize>,
}

impl TokenSet {
    /// Item-space width `d`; tokens are `2d` wide.
    pub fn item_dim(&self) -> usize {
        self.support.cols() / 2
    }

    /// Writes the binary export: little-endian u64 header
    /// `N, K, support rows, |Q|, d`, then one u32 class id per support row,
    /// then support and query tokens as row-major f32.
    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        for v in [self.n_way, self.k_shot, self.support.rows(), self.query.rows(), self.item_dim()] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        for &c in &self.support_classes {
            w.write_all(&(c as u32).to_le_bytes())?;
        }
        for x in self.support.as_slice().iter().chain(self.query.as_slice()) {
            w.write_all(&(*x as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| GiltError::io(path, e))?);
        self.write_to(&mut f).and_then(|_| f.flush()).map_err(|e| GiltError::io(path, e))
    }

    /// Reads the binary export back (values rounded to f32). Degenerate
    /// classes are not stored and come back empty.
    pub fn read_from(r: &mut impl Read) -> Result<TokenSet> {
        let bad = |e: std::io::Error| GiltError::Parse(format!("token file: {e}"));
        let mut h = [0usize; 5];
        let mut b8 = [0u8; 8];
        for v in h.iter_mut() {
            r.read_exact(&mut b8).map_err(bad)?;
            *v = u64::from_le_bytes(b8) as usize;
        }
        let [n_way, k_shot, s, q, d] = h;
        let mut b4 = [0u8; 4];
        let mut classes = Vec::with_capacity(s.min(1 << 16));
        for _ in 0..s {
            r.read_exact(&mut b4).map_err(bad)?;
            classes.push(u32::from_le_bytes(b4) as usize);
        }
        let mut read_mat = |rows: usize| -> Result<Matrix> {
            let mut data = Vec::with_capacity((rows * 2 * d).min(1 << 20));
            for _ in 0..rows * 2 * d {
                r.read_exact(&mut b4).map_err(bad)?;
                data.push(f32::from_le_bytes(b4) as f64);
            }
            Matrix::from_vec(rows, 2 * d, data)
        };
        let support = read_mat(s)?;
        let query = read_mat(q)?;
        Ok(TokenSet { n_way, k_shot, support, query, support_classes: classes, degenerate: Vec::new() })
    }
}

/// Builds a [`TokenSet`] from plain representation matrices.
pub fn build_tokens(
    support: &Matrix,
    labels: &[usize],
    n_way: usize,
    k_shot: usize,
    query: &Matrix,
) -> Result<TokenSet> {
    let mut tape = Tape::new();
    let s = tape.constant(support.clone());
    let q = tape.constant(query.clone());
    let t = build_tokens_on_tape(&mut tape, s, labels, n_way, q)?;
    Ok(TokenSet {
        n_way,
        k_shot,
        support: tape.value(t.support).clone(),
        query: tape.value(t.query).clone(),
        support_classes: labels.to_vec(),
        degenerate: t.degenerate,
    })
}

/// Prototype rows `p_c` of a token set (the class-space block of the first
/// support token of each class).
pub fn prototypes(tokens: &TokenSet) -> Matrix {
    let d = tokens.item_dim();
    let mut out = Matrix::zeros(tokens.n_way, d);
    for (i, &c) in tokens.support_classes.iter().enumerate() {
        out.row_mut(c).copy_from_slice(&tokens.support.row(i)[d..]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn single_shot_prototype_is_normalized_item() {
        let t = build_tokens(&m(&[&[3.0, 4.0], &[0.0, -2.0]]), &[0, 1], 2, 1, &m(&[&[1.0, 1.0]])).unwrap();
        assert_eq!(t.support.row(0), &[3.0, 4.0, 0.6, 0.8]);
        assert_eq!(t.support.row(1), &[0.0, -2.0, 0.0, -1.0]);
        assert!(t.degenerate.is_empty());
    }

    #[test]
    fn opposite_items_cancel_to_zero_prototype() {
        let t = build_tokens(&m(&[&[1.0, -2.0], &[-1.0, 2.0], &[1.0, 0.0]]), &[0, 0, 1], 2, 2, &Matrix::zeros(0, 2))
            .unwrap();
        assert_eq!(t.degenerate, vec![0]);
        assert_eq!(&t.support.row(0)[2..], &[0.0, 0.0]);
        assert_eq!(t.query.shape(), (0, 4));
    }

    #[test]
    fn two_way_two_shot_by_hand() {
        let s = m(&[&[1.0, 2.0, 2.0], &[3.0, 0.0, 4.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, -1.0]]);
        let t = build_tokens(&s, &[0, 0, 1, 1], 2, 2, &m(&[&[5.0, 5.0, 5.0]])).unwrap();
        // class 0 mean (2, 1, 3), norm √14; class 1 mean (0, .5, -.5), norm √.5
        let r14 = 14f64.sqrt();
        let p0 = [2.0 / r14, 1.0 / r14, 3.0 / r14];
        let p1 = [0.0, 0.5 / 0.5f64.sqrt(), -0.5 / 0.5f64.sqrt()];
        for (row, p) in [(0, p0), (1, p0), (2, p1), (3, p1)] {
            for c in 0..3 {
                assert!((t.support.get(row, 3 + c) - p[c]).abs() < 1e-12);
                assert_eq!(t.support.get(row, c), s.get(row, c));
            }
        }
        assert_eq!(t.query.row(0), &[5.0, 5.0, 5.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn empty_class_rejected() {
        let r = build_tokens(&m(&[&[1.0], &[2.0]]), &[0, 0], 2, 1, &Matrix::zeros(0, 1));
        assert!(matches!(r, Err(GiltError::Insufficient(_))));
        let r = build_tokens(&m(&[&[1.0]]), &[3], 2, 1, &Matrix::zeros(0, 1));
        assert!(r.is_err());
    }

    #[test]
    fn link_repr_is_symmetric_product_and_graph_repr_is_mean() {
        let mut tape = Tape::new();
        let h = tape.constant(m(&[&[1.0, 2.0], &[3.0, -1.0], &[0.5, 0.5]]));
        let items = [ItemRef::Link(0, 1), ItemRef::Link(1, 1)];
        let r = item_reprs_on_tape(&mut tape, &Embedded::Nodes(h), &items, 2).unwrap();
        assert_eq!(tape.value(r).to_rows(), vec![vec![3.0, -2.0], vec![9.0, 1.0]]);

        let mut map = BTreeMap::new();
        map.insert(4, h);
        let one = tape.constant(m(&[&[7.0, 8.0]]));
        map.insert(9, one);
        let r = item_reprs_on_tape(&mut tape, &Embedded::Graphs(&map), &[ItemRef::Graph(9), ItemRef::Graph(4)], 2)
            .unwrap();
        assert_eq!(tape.value(r).row(0), &[7.0, 8.0]);
        assert!((tape.value(r).get(1, 0) - 1.5).abs() < 1e-15);
        assert!(item_reprs_on_tape(&mut tape, &Embedded::Graphs(&map), &[ItemRef::Graph(1)], 2).is_err());
        assert!(item_reprs_on_tape(&mut tape, &Embedded::Nodes(h), &[ItemRef::Node(3)], 2).is_err());
    }

    #[test]
    fn binary_round_trip() {
        let t = build_tokens(&m(&[&[0.5, 1.0], &[2.0, 0.25]]), &[1, 0], 2, 1, &m(&[&[1.0, -1.0]])).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 5 * 8 + 2 * 4 + 3 * 4 * 4);
        let back = TokenSet::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.support_classes, vec![1, 0]);
        assert_eq!(back.query.row(0), &[1.0, -1.0, 0.0, 0.0]);
        assert!(back.support.max_abs_diff(&t.support) < 1e-7);
        assert!(TokenSet::read_from(&mut &buf[..20]).is_err());
    }
}
