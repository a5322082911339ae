use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::numerics::{Matrix, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    /// Decoupled weight decay.
    AdamW,
    /// Weight decay folded into the gradient (L2 penalty).
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub optimizer: Optimizer,
}

/// First and second moments per parameter plus the shared step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Matrix>,
    pub v: BTreeMap<String, Matrix>,
}

/// One optimizer step. Parameters without a gradient entry are left alone.
pub fn adamw_step(params: &mut ParamStore, grads: &BTreeMap<String, Matrix>, state: &mut AdamState, hp: &AdamHyper) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let Some(g) = grads.get(name) else { continue };
        assert_eq!(g.shape(), p.shape(), "gradient shape for {name}");
        let m = state.m.entry(name.clone()).or_insert_with(|| Matrix::zeros(p.rows(), p.cols()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Matrix::zeros(p.rows(), p.cols()));
        let ps = p.as_mut_slice();
        let (ms, vs) = (m.as_mut_slice(), v.as_mut_slice());
        for (i, &gi) in g.as_slice().iter().enumerate() {
            let gi = match hp.optimizer {
                Optimizer::Adam => gi + hp.weight_decay * ps[i],
                Optimizer::AdamW => gi,
            };
            ms[i] = hp.beta1 * ms[i] + (1.0 - hp.beta1) * gi;
            vs[i] = hp.beta2 * vs[i] + (1.0 - hp.beta2) * gi * gi;
            let mhat = ms[i] / bc1;
            let vhat = vs[i] / bc2;
            if hp.optimizer == Optimizer::AdamW {
                ps[i] -= hp.lr * hp.weight_decay * ps[i];
            }
            ps[i] -= hp.lr * mhat / (vhat.sqrt() + hp.eps);
        }
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Matrix>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.as_slice())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.as_mut_slice().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hp(lr: f64, wd: f64) -> AdamHyper {
        AdamHyper { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: wd, optimizer: Optimizer::AdamW }
    }

    fn one(name: &str, v: f64) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert(name, Matrix::scalar(v));
        p
    }

    #[test]
    fn zero_gradient_zero_decay_is_a_no_op() {
        let mut p = one("w", 0.7);
        let g = BTreeMap::from([("w".to_string(), Matrix::scalar(0.0))]);
        let mut s = AdamState::default();
        for _ in 0..3 {
            adamw_step(&mut p, &g, &mut s, &hp(0.1, 0.0));
        }
        assert_eq!(p.get("w").unwrap().scalar_value(), 0.7);
    }

    #[test]
    fn first_step_with_unit_gradient() {
        let mut p = one("w", 2.0);
        let g = BTreeMap::from([("w".to_string(), Matrix::scalar(1.0))]);
        let mut s = AdamState::default();
        adamw_step(&mut p, &g, &mut s, &hp(0.01, 0.0));
        // m̂ = 0.1/0.1 = 1, v̂ = 0.001/0.001 = 1, step = lr / (1 + eps)
        let expect = 2.0 - 0.01 / (1.0 + 1e-8);
        assert!((p.get("w").unwrap().scalar_value() - expect).abs() < 1e-12);
    }

    #[test]
    fn decay_without_gradient_is_pure_shrinkage() {
        let mut p = one("w", 3.0);
        let g = BTreeMap::from([("w".to_string(), Matrix::scalar(0.0))]);
        let mut s = AdamState::default();
        adamw_step(&mut p, &g, &mut s, &hp(0.1, 0.5));
        assert!((p.get("w").unwrap().scalar_value() - 3.0 * (1.0 - 0.05)).abs() < 1e-15);
    }

    #[test]
    fn adam_folds_decay_into_gradient() {
        let mut p = one("w", 3.0);
        let g = BTreeMap::from([("w".to_string(), Matrix::scalar(0.0))]);
        let mut s = AdamState::default();
        let h = AdamHyper { optimizer: Optimizer::Adam, ..hp(0.1, 0.5) };
        adamw_step(&mut p, &g, &mut s, &h);
        // effective gradient 1.5 > 0, normalized step ≈ lr
        assert!((p.get("w").unwrap().scalar_value() - (3.0 - 0.1 / (1.0 + 1e-8 / 1.5))).abs() < 1e-12);
    }

    #[test]
    fn clipping_rescales_to_max_norm() {
        let mut g = BTreeMap::from([
            ("a".to_string(), Matrix::row_vector(&[3.0, 0.0])),
            ("b".to_string(), Matrix::scalar(4.0)),
        ]);
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g["a"].get(0, 0) - 0.6).abs() < 1e-15 && (g["b"].scalar_value() - 0.8).abs() < 1e-15);
        assert_eq!(clip_global_norm(&mut g, 2.0), 1.0);
        assert!((g["b"].scalar_value() - 0.8).abs() < 1e-15);
    }
}
