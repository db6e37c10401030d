//! ROC AUC, point-biserial correlation and the relevance consistency ratio.

use super::MetricError;
use crate::corpus::Grade;

fn class_counts(labels: &[u8]) -> Result<(usize, usize), MetricError> {
    if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
        return Err(MetricError::LabelRange(bad));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricError::SingleClass);
    }
    Ok((pos, neg))
}

fn check_lengths(scores: &[f64], labels: &[u8]) -> Result<(), MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch(scores.len(), labels.len()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(MetricError::NonFinite);
    }
    Ok(())
}

/// Mann–Whitney formulation with average ranks for ties.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64, MetricError> {
    check_lengths(scores, labels)?;
    let (n_pos, n_neg) = class_counts(labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of (1-based) ranks of the positives, ties sharing their mean rank.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let mean_rank = (i + 1 + j) as f64 / 2.0;
        let pos_in_tie = order[i..j].iter().filter(|&&k| labels[k] == 1).count();
        rank_sum += mean_rank * pos_in_tie as f64;
        i = j;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// O(n²) pairwise definition: wins count 1, ties 0.5.
pub fn roc_auc_bruteforce(scores: &[f64], labels: &[u8]) -> Result<f64, MetricError> {
    check_lengths(scores, labels)?;
    let (n_pos, n_neg) = class_counts(labels)?;
    let mut total = 0.0;
    for (sp, _) in scores.iter().zip(labels).filter(|(_, &l)| l == 1) {
        for (sn, _) in scores.iter().zip(labels).filter(|(_, &l)| l == 0) {
            total += if sp > sn {
                1.0
            } else if sp == sn {
                0.5
            } else {
                0.0
            };
        }
    }
    Ok(total / (n_pos as f64 * n_neg as f64))
}

/// Point-biserial correlation `((M₁ − M₀)/σₙ)·√(n₁n₀/n²)` with the
/// population standard deviation.
pub fn pbc(scores: &[f64], labels: &[u8]) -> Result<f64, MetricError> {
    check_lengths(scores, labels)?;
    let (n1, n0) = class_counts(labels)?;
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    if var <= 0.0 {
        return Err(MetricError::ZeroVariance);
    }
    let m1 = scores.iter().zip(labels).filter(|(_, &l)| l == 1).map(|(s, _)| s).sum::<f64>() / n1 as f64;
    let m0 = scores.iter().zip(labels).filter(|(_, &l)| l == 0).map(|(s, _)| s).sum::<f64>() / n0 as f64;
    Ok((m1 - m0) / var.sqrt() * ((n1 * n0) as f64 / (n * n)).sqrt())
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Off-topic pairs over relevant pairs among those scoring strictly above
/// the median off-topic score. Somewhat-relevant pairs are ignored.
pub fn rcr(scored: &[(f64, Grade)]) -> Result<f64, MetricError> {
    let mut off: Vec<f64> = scored.iter().filter(|(_, g)| *g == Grade::OffTopic).map(|(s, _)| *s).collect();
    if off.is_empty() {
        return Err(MetricError::NoOffTopic);
    }
    let m = median(&mut off);
    let above_off = off.iter().filter(|&&s| s > m).count();
    let above_rel = scored.iter().filter(|(s, g)| *g == Grade::Relevant && *s > m).count();
    if above_rel == 0 {
        return Err(MetricError::ZeroDenominator);
    }
    Ok(above_off as f64 / above_rel as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.4; 6], &[1, 0, 1, 0, 0, 1]).unwrap(), 0.5);
        assert_eq!(roc_auc(&[0.5, 0.7, 0.2], &[1, 0, 0]).unwrap(), 0.5);
        for (s, l) in [
            (vec![0.9, 0.8, 0.2, 0.1], vec![1, 1, 0, 0]),
            (vec![0.4; 6], vec![1, 0, 1, 0, 0, 1]),
            (vec![0.5, 0.7, 0.2], vec![1, 0, 0]),
        ] {
            assert_eq!(roc_auc_bruteforce(&s, &l).unwrap(), roc_auc(&s, &l).unwrap());
        }
        assert_eq!(roc_auc(&[0.1, 0.2], &[1, 1]), Err(MetricError::SingleClass));
        assert_eq!(roc_auc_bruteforce(&[0.1, 0.2], &[0, 0]), Err(MetricError::SingleClass));
    }

    #[test]
    fn pbc_examples() {
        assert!((pbc(&[1.0, 1.0, 0.0, 0.0], &[1, 1, 0, 0]).unwrap() - 1.0).abs() < 1e-12);
        let expected = (1.0 / 0.5f64.sqrt()) * 0.5;
        assert!((pbc(&[2.0, 1.0, 1.0, 0.0], &[1, 1, 0, 0]).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.70711).abs() < 1e-5);
        assert_eq!(pbc(&[3.0; 4], &[1, 0, 1, 0]), Err(MetricError::ZeroVariance));
    }

    #[test]
    fn rcr_examples() {
        use Grade::*;
        let scored = [(0.1, OffTopic), (0.3, OffTopic), (0.5, OffTopic), (0.6, Relevant), (0.7, Relevant), (0.2, Relevant), (0.9, SomewhatRelevant)];
        assert_eq!(rcr(&scored).unwrap(), 0.5);
        let none_above = [(0.1, OffTopic), (0.5, OffTopic), (0.2, Relevant)];
        assert_eq!(rcr(&none_above), Err(MetricError::ZeroDenominator));
        let flat = [(0.4, OffTopic), (0.4, OffTopic), (0.4, OffTopic), (0.5, Relevant)];
        assert_eq!(rcr(&flat).unwrap(), 0.0);
        assert_eq!(rcr(&[(0.5, Relevant)]), Err(MetricError::NoOffTopic));
    }
}
