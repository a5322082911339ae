//! Central finite-difference verification of analytic gradients.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::matrix::Matrix;
use super::params::ParamStore;
use crate::error::{GiltError, Result};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub h: f64,
    /// Pass threshold on the maximum relative error.
    pub tol: f64,
    /// Denominator floor so that near-zero gradients are compared absolutely.
    pub floor: f64,
    /// Coordinates sampled per parameter array; `None` checks every entry.
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            h: 1e-5,
            tol: 1e-4,
            floor: 1e-5,
            max_coords_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter, flat index)` of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
    pub per_param: Vec<(String, f64)>,
    pub passed: bool,
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `analytic` against `(f(θ+h) − f(θ−h)) / 2h`, coordinate by
/// coordinate, for every parameter named in `analytic`.
pub fn grad_check<F>(
    f: F,
    params: &ParamStore,
    analytic: &BTreeMap<String, Matrix>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<f64>,
{
    let base = f(params)?;
    if !base.is_finite() {
        return Err(GiltError::Numerical(format!("objective is {base}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
        per_param: Vec::new(),
        passed: true,
    };
    for (name, grad) in analytic {
        let len = params.get(name)?.len();
        if grad.len() != len {
            return Err(GiltError::Shape(format!(
                "gradient for `{name}` has {} entries, parameter has {len}",
                grad.len()
            )));
        }
        let coords: Vec<usize> = match cfg.max_coords_per_param {
            Some(k) if k < len => {
                let mut c = sample(&mut rng, len, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..len).collect(),
        };
        let mut worst_here: f64 = 0.0;
        for idx in coords {
            let orig = params.get(name)?.as_slice()[idx];
            work.get_mut(name).unwrap().as_mut_slice()[idx] = orig + cfg.h;
            let fp = f(&work)?;
            work.get_mut(name).unwrap().as_mut_slice()[idx] = orig - cfg.h;
            let fm = f(&work)?;
            work.get_mut(name).unwrap().as_mut_slice()[idx] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(GiltError::Numerical(format!(
                    "objective non-finite when perturbing `{name}`[{idx}]"
                )));
            }
            let numeric = (fp - fm) / (2.0 * cfg.h);
            let err = relative_error(grad.as_slice()[idx], numeric, cfg.floor);
            report.coords_checked += 1;
            worst_here = worst_here.max(err);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), idx));
            }
        }
        report.per_param.push((name.clone(), worst_here));
    }
    report.passed = report.max_rel_error < cfg.tol;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_setup() -> (ParamStore, Matrix) {
        let mut p = ParamStore::new();
        p.insert("theta", Matrix::from_rows(&[vec![0.3, -1.2, 2.0]]).unwrap());
        let a = Matrix::from_rows(&[vec![1.5, -0.5, 4.0]]).unwrap();
        (p, a)
    }

    #[test]
    fn linear_function_matches_to_machine_precision() {
        let (p, a) = linear_setup();
        let f = |ps: &ParamStore| -> Result<f64> {
            let t = ps.get("theta")?;
            Ok(t.as_slice().iter().zip(a.as_slice()).map(|(x, y)| x * y).sum())
        };
        let mut analytic = BTreeMap::new();
        analytic.insert("theta".to_string(), a.clone());
        let rep = grad_check(f, &p, &analytic, &GradCheckConfig::default()).unwrap();
        assert!(rep.passed);
        assert!(rep.max_rel_error < 1e-9, "{}", rep.max_rel_error);
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let (p, a) = linear_setup();
        let f = |ps: &ParamStore| -> Result<f64> {
            let t = ps.get("theta")?;
            Ok(t.as_slice().iter().zip(a.as_slice()).map(|(x, y)| x * y).sum())
        };
        let mut bad = a.clone();
        bad.as_mut_slice()[1] *= 1.01;
        let mut analytic = BTreeMap::new();
        analytic.insert("theta".to_string(), bad);
        let rep = grad_check(f, &p, &analytic, &GradCheckConfig::default()).unwrap();
        assert!(!rep.passed);
        assert_eq!(rep.worst, Some(("theta".to_string(), 1)));
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let (p, _) = linear_setup();
        let analytic = BTreeMap::new();
        let r = grad_check(|_| Ok(f64::NAN), &p, &analytic, &GradCheckConfig::default());
        assert!(matches!(r, Err(GiltError::Numerical(_))));
    }
}
