use crate::error::{GiltError, Result};

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(GiltError::Shape(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Mann–Whitney AUC: probability that a random positive outscores a random
/// negative, ties counting one half. Uses midranks, `O(n log n)`.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(GiltError::Shape("scores and labels differ in length".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(GiltError::NonFinite("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(GiltError::Insufficient("ROC-AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based midrank of the tie block i..=j
        let mid = (i + j) as f64 / 2.0 + 1.0;
        pos_rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Fraction of positives scoring strictly above the `k`-th largest negative.
pub fn hits_at_k(pos: &[f64], neg: &[f64], k: usize) -> Result<f64> {
    if k == 0 || neg.len() < k {
        return Err(GiltError::Insufficient(format!("Hits@{k} needs at least {k} negatives, got {}", neg.len())));
    }
    if pos.is_empty() {
        return Err(GiltError::Insufficient("Hits@K needs positives".into()));
    }
    let mut sorted = neg.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let threshold = sorted[k - 1];
    Ok(pos.iter().filter(|&&p| p > threshold).count() as f64 / pos.len() as f64)
}

/// Mean and sample standard deviation; the sd is omitted below two values.
pub fn mean_sd(xs: &[f64]) -> (f64, Option<f64>) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let sd = (xs.len() >= 2).then(|| (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (mean, sd)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_auc(s: &[f64], l: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if l[i] && !l[j] {
                    den += 1.0;
                    if s[i] > s[j] {
                        num += 1.0;
                    } else if s[i] == s[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    #[test]
    fn accuracy_fixtures() {
        assert_eq!(accuracy(&[0, 1, 1, 0], &[0, 1, 0, 0]).unwrap(), 0.75);
        assert_eq!(accuracy(&[2, 2], &[2, 2]).unwrap(), 1.0);
        assert_eq!(accuracy(&[1, 0], &[0, 1]).unwrap(), 0.0);
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn auc_fixtures() {
        assert_eq!(roc_auc(&[0.9, 0.8, 0.4, 0.3], &[true, false, true, false]).unwrap(), 0.75);
        assert_eq!(roc_auc(&[0.2, 0.9], &[false, true]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.5; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
        assert!(roc_auc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn hits_fixtures() {
        let h = hits_at_k(&[0.9, 0.5, 0.2], &[0.8, 0.6, 0.4, 0.1], 2).unwrap();
        assert!((h - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(hits_at_k(&[0.9, 0.95], &[0.1, 0.2], 1).unwrap(), 1.0);
        assert_eq!(hits_at_k(&[0.3, 0.5], &[0.1, 0.2, 0.25], 3).unwrap(), 1.0);
        assert!(hits_at_k(&[0.3], &[0.1], 2).is_err());
    }

    #[test]
    fn mean_sd_omits_single_run() {
        assert_eq!(mean_sd(&[0.5]), (0.5, None));
        let (m, s) = mean_sd(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s.unwrap() - 2f64.sqrt()).abs() < 1e-15);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn auc_matches_pairwise_enumeration(
            items in prop::collection::vec((0u8..20, any::<bool>()), 2..200)
        ) {
            let scores: Vec<f64> = items.iter().map(|(s, _)| *s as f64 / 7.0).collect();
            let labels: Vec<bool> = items.iter().map(|(_, l)| *l).collect();
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let a = roc_auc(&scores, &labels).unwrap();
            prop_assert!((a - brute_auc(&scores, &labels)).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn hits_invariant_under_monotone_transform(
            pos in prop::collection::vec(-5.0f64..5.0, 1..40),
            neg in prop::collection::vec(-5.0f64..5.0, 1..60),
            k in 1usize..60,
        ) {
            prop_assume!(k <= neg.len());
            let f = |x: f64| (x * 0.7).exp() * 3.0 + 1.0;
            let a = hits_at_k(&pos, &neg, k).unwrap();
            let tp: Vec<f64> = pos.iter().map(|&x| f(x)).collect();
            let tn: Vec<f64> = neg.iter().map(|&x| f(x)).collect();
            prop_assert_eq!(a, hits_at_k(&tp, &tn, k).unwrap());
        }

        #[test]
        fn accuracy_counts_matches(pairs in prop::collection::vec((0usize..4, 0usize..4), 1..100)) {
            let (p, l): (Vec<usize>, Vec<usize>) = pairs.iter().cloned().unzip();
            let hits = pairs.iter().filter(|(a, b)| a == b).count();
            prop_assert_eq!(accuracy(&p, &l).unwrap(), hits as f64 / pairs.len() as f64);
        }
    }
}
