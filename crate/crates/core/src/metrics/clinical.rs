//! Clinical-efficacy scores over label vectors parsed from reports.

use super::MetricError;

/// Example-averaged precision, recall and F1 over positive labels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Scores of one example. Both sides without positives count as perfect;
/// exactly one side without positives scores 0.
pub fn example_prf(predicted: &[bool], truth: &[bool]) -> Prf {
    let np = predicted.iter().filter(|&&b| b).count();
    let nt = truth.iter().filter(|&&b| b).count();
    if np == 0 && nt == 0 {
        return Prf {
            precision: 1.0,
            recall: 1.0,
            f1: 1.0,
        };
    }
    if np == 0 || nt == 0 {
        return Prf {
            precision: 0.0,
            recall: 0.0,
            f1: 0.0,
        };
    }
    let tp = predicted.iter().zip(truth).filter(|(&p, &t)| p && t).count() as f64;
    let precision = tp / np as f64;
    let recall = tp / nt as f64;
    let f1 = if tp == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    Prf { precision, recall, f1 }
}

pub fn ce_prf(predicted: &[Vec<bool>], truth: &[Vec<bool>]) -> Result<Prf, MetricError> {
    if predicted.len() != truth.len() {
        return Err(MetricError::LengthMismatch {
            left: predicted.len(),
            right: truth.len(),
        });
    }
    if predicted.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut sum = (0.0, 0.0, 0.0);
    for (p, t) in predicted.iter().zip(truth) {
        if p.len() != t.len() {
            return Err(MetricError::LengthMismatch {
                left: p.len(),
                right: t.len(),
            });
        }
        let s = example_prf(p, t);
        sum.0 += s.precision;
        sum.1 += s.recall;
        sum.2 += s.f1;
    }
    let n = predicted.len() as f64;
    Ok(Prf {
        precision: sum.0 / n,
        recall: sum.1 / n,
        f1: sum.2 / n,
    })
}

/// `1 − Hamming/C`.
pub fn label_similarity(a: &[bool], b: &[bool]) -> f64 {
    if a.is_empty() {
        return 1.0;
    }
    let diff = a.iter().zip(b).filter(|(x, y)| x != y).count();
    1.0 - diff as f64 / a.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_is_perfect() {
        let v = vec![vec![true, false, true], vec![false, false, false]];
        let s = ce_prf(&v, &v).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn all_negative_prediction_has_zero_recall() {
        let p = vec![vec![false; 3]; 2];
        let t = vec![vec![true, false, false], vec![false, true, true]];
        assert_eq!(ce_prf(&p, &t).unwrap().recall, 0.0);
    }

    #[test]
    fn length_mismatch() {
        assert!(matches!(
            ce_prf(&[vec![true]], &[]),
            Err(MetricError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn partial_overlap() {
        let s = example_prf(&[true, true, false], &[true, false, true]);
        assert_eq!((s.precision, s.recall, s.f1), (0.5, 0.5, 0.5));
        assert!((label_similarity(&[true, true, false], &[true, false, true]) - 1.0 / 3.0).abs() < 1e-15);
    }
}
