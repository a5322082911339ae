//! Differentiable computation substrate: dense matrices, a reverse-mode tape
//! covering every operation the model uses, and finite-difference checking.

mod gradcheck;
mod matrix;
mod params;
mod sparse;
mod tape;

pub use gradcheck::{grad_check, relative_error, GradCheckConfig, GradCheckReport};
pub use matrix::{pairwise_sum, Matrix};
pub use params::ParamStore;
pub use sparse::SparseMatrix;
pub use tape::{softmax_in_place, Gradients, Tape, Var, COS_EPS, ZERO_NORM};

/// Operations the tape differentiates.
pub fn required_ops() -> &'static [&'static str] {
    &[
        "matmul",
        "matmul_nt",
        "add",
        "sub",
        "mul",
        "add_row",
        "mul_row",
        "scale",
        "concat_cols",
        "slice_cols",
        "concat_rows",
        "gather_rows",
        "mean_rows",
        "sum",
        "mean",
        "norm_rows",
        "l2_normalize_rows",
        "softmax_rows",
        "layer_norm_rows",
        "standardize_cols",
        "relu",
        "dropout",
        "log_clamped",
        "pick_per_row",
        "spmm",
        "normalize_rows_clamped",
        "cosine_rows",
    ]
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;
    use std::sync::Arc;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::error::Result;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        let data = (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        Matrix::from_vec(r, c, data).unwrap()
    }

    /// Checks `sum(weights ⊙ build(inputs))` against finite differences.
    fn check_op<F>(inputs: Vec<(&str, Matrix)>, build: F) -> f64
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let mut store = ParamStore::new();
        for (n, m) in &inputs {
            store.insert(*n, m.clone());
        }
        let names: Vec<String> = inputs.iter().map(|(n, _)| n.to_string()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let probe_shape = {
            let mut t = Tape::new();
            let vars: Vec<Var> = names.iter().map(|n| t.param(n, store.get(n).unwrap())).collect();
            let out = build(&mut t, &vars);
            t.shape(out)
        };
        let weights = random(&mut rng, probe_shape.0, probe_shape.1);
        let objective = |ps: &ParamStore, t: &mut Tape| -> Var {
            let vars: Vec<Var> = names.iter().map(|n| t.param(n, ps.get(n).unwrap())).collect();
            let out = build(t, &vars);
            let w = t.constant(weights.clone());
            let prod = t.mul(out, w);
            t.sum(prod)
        };
        let mut tape = Tape::new();
        let loss = objective(&store, &mut tape);
        let grads = tape.backward(loss);
        let analytic: BTreeMap<String, Matrix> = tape.param_grads(&grads);
        let f = |ps: &ParamStore| -> Result<f64> {
            let mut t = Tape::new();
            let l = objective(ps, &mut t);
            Ok(t.value(l).scalar_value())
        };
        let rep = grad_check(f, &store, &analytic, &GradCheckConfig::default()).unwrap();
        rep.max_rel_error
    }

    #[test]
    fn softmax_of_zeros_is_exactly_uniform() {
        let mut t = Tape::new();
        let x = t.constant(Matrix::zeros(1, 3));
        let y = t.softmax_rows(x);
        for &v in t.value(y).as_slice() {
            assert_eq!(v, 1.0 / 3.0);
        }
    }

    #[test]
    fn norm_gradient_at_three_four() {
        let mut t = Tape::new();
        let x = t.param("x", &Matrix::row_vector(&[3.0, 4.0]));
        let n = t.norm_rows(x);
        let s = t.sum(n);
        let g = t.backward(s);
        let gx = g.wrt(x).unwrap();
        assert!((gx.get(0, 0) - 0.6).abs() < 1e-10);
        assert!((gx.get(0, 1) - 0.8).abs() < 1e-10);
    }

    #[test]
    fn layer_norm_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, 4, 8);
        let err = check_op(vec![("x", x)], |t, v| t.layer_norm_rows(v[0], 1e-5));
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn every_op_passes_vjp_check_on_random_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..5 {
            let r = rng.random_range(1..6);
            let c = rng.random_range(2..7);
            let k = rng.random_range(1..5);
            let a = random(&mut rng, r, c);
            let b = random(&mut rng, r, c);
            let w = random(&mut rng, c, k);
            let row = random(&mut rng, 1, c);
            let pos = a.map(|x| x.abs() + 0.1);
            let tol = 1e-4;
            let cases: Vec<(&str, f64)> = vec![
                ("matmul", check_op(vec![("a", a.clone()), ("w", w.clone())], |t, v| t.matmul(v[0], v[1]))),
                ("matmul_nt", check_op(vec![("a", a.clone()), ("b", b.clone())], |t, v| t.matmul_nt(v[0], v[1]))),
                ("add", check_op(vec![("a", a.clone()), ("b", b.clone())], |t, v| t.add(v[0], v[1]))),
                ("sub", check_op(vec![("a", a.clone()), ("b", b.clone())], |t, v| t.sub(v[0], v[1]))),
                ("mul", check_op(vec![("a", a.clone()), ("b", b.clone())], |t, v| t.mul(v[0], v[1]))),
                ("add_row", check_op(vec![("a", a.clone()), ("r", row.clone())], |t, v| t.add_row(v[0], v[1]))),
                ("mul_row", check_op(vec![("a", a.clone()), ("r", row.clone())], |t, v| t.mul_row(v[0], v[1]))),
                ("scale", check_op(vec![("a", a.clone())], |t, v| t.scale(v[0], -2.5))),
                ("concat_cols", check_op(vec![("a", a.clone()), ("b", b.clone())], |t, v| t.concat_cols(&[v[0], v[1]]))),
                ("slice_cols", check_op(vec![("a", a.clone())], |t, v| t.slice_cols(v[0], 1, 1))),
                ("concat_rows", check_op(vec![("a", a.clone()), ("b", b.clone())], |t, v| t.concat_rows(&[v[0], v[1]]))),
                ("gather_rows", check_op(vec![("a", a.clone())], move |t, v| t.gather_rows(v[0], &[0, r - 1, 0]))),
                ("mean_rows", check_op(vec![("a", a.clone())], |t, v| t.mean_rows(v[0]))),
                ("sum", check_op(vec![("a", a.clone())], |t, v| t.sum(v[0]))),
                ("mean", check_op(vec![("a", a.clone())], |t, v| t.mean(v[0]))),
                ("norm_rows", check_op(vec![("a", a.clone())], |t, v| t.norm_rows(v[0]))),
                ("l2_normalize_rows", check_op(vec![("a", a.clone())], |t, v| t.l2_normalize_rows(v[0]))),
                ("softmax_rows", check_op(vec![("a", a.clone())], |t, v| t.softmax_rows(v[0]))),
                ("layer_norm_rows", check_op(vec![("a", a.clone())], |t, v| t.layer_norm_rows(v[0], 1e-5))),
                ("relu", check_op(vec![("a", a.clone())], |t, v| t.relu(v[0]))),
                ("log_clamped", check_op(vec![("p", pos.clone())], |t, v| t.log_clamped(v[0], 1e-12))),
                ("pick_per_row", check_op(vec![("a", a.clone())], move |t, v| {
                    let idx: Vec<usize> = (0..r).map(|i| i % c).collect();
                    t.pick_per_row(v[0], &idx)
                })),
                ("normalize_rows_clamped", check_op(vec![("a", a.clone())], |t, v| t.normalize_rows_clamped(v[0], 1e-3))),
                ("cosine_rows", check_op(vec![("a", a.clone()), ("b", b.clone())], |t, v| t.cosine_rows(v[0], v[1]))),
                ("dropout", check_op(vec![("a", a.clone())], |t, v| {
                    let mut drng = ChaCha8Rng::seed_from_u64(3);
                    t.dropout(v[0], 0.3, &mut drng)
                })),
            ];
            for (name, err) in cases {
                assert!(err < tol, "trial {trial}: {name} rel err {err}");
            }
            if r >= 2 {
                let err = check_op(vec![("a", a.clone())], |t, v| t.standardize_cols(v[0], 1e-12));
                assert!(err < tol, "standardize_cols rel err {err}");
            }
            let n = r;
            let trip: Vec<(usize, usize, f64)> = (0..n)
                .flat_map(|i| [(i, i, 0.5), (i, (i + 1) % n, 0.25)])
                .collect();
            let s = Arc::new(SparseMatrix::from_triplets(n, n, &trip));
            let err = check_op(vec![("a", a.clone())], move |t, v| t.spmm(&s, v[0]));
            assert!(err < tol, "spmm rel err {err}");
        }
    }

    #[test]
    fn zero_rows_normalize_to_zero_with_zero_gradient() {
        let mut t = Tape::new();
        let x = t.param("x", &Matrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap());
        let y = t.l2_normalize_rows(x);
        assert_eq!(t.value(y).row(0), &[0.0, 0.0]);
        let s = t.sum(y);
        let g = t.backward(s);
        assert_eq!(g.wrt(x).unwrap().row(0), &[0.0, 0.0]);
    }

    #[test]
    fn cosine_against_zero_row_is_zero_but_passes_gradient() {
        let mut t = Tape::new();
        let q = t.param("q", &Matrix::zeros(1, 2));
        let p = t.constant(Matrix::from_rows(&[vec![3.0, 4.0]]).unwrap());
        let c = t.cosine_rows(q, p);
        assert_eq!(t.value(c).scalar_value(), 0.0);
        let s = t.sum(c);
        let g = t.backward(s);
        let gq = g.wrt(q).unwrap();
        assert!((gq.get(0, 0) - 0.6 / COS_EPS).abs() < 1e-3 && (gq.get(0, 1) - 0.8 / COS_EPS).abs() < 1e-3);
    }

    #[test]
    fn identical_seeds_give_bit_identical_losses() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let a = random(&mut rng, 6, 5);
            let mut t = Tape::new();
            let x = t.param("x", &a);
            let d = t.dropout(x, 0.2, &mut rng);
            let y = t.layer_norm_rows(d, 1e-5);
            let z = t.softmax_rows(y);
            let l = t.mean(z);
            t.value(l).scalar_value().to_bits()
        };
        assert_eq!(run(), run());
    }
}
