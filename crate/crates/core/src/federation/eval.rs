use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::nn::{predict, ParamSet};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

/// Accuracy and per-class precision/recall/F1 from predicted and true labels.
/// Undefined ratios (no predictions or no support) are reported as 0.
pub fn classification_metrics(predicted: &[usize], actual: &[usize], num_classes: usize) -> Result<Classification> {
    if predicted.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    if predicted.len() != actual.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} labels",
            predicted.len(),
            actual.len()
        )));
    }
    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    for (&p, &a) in predicted.iter().zip(actual) {
        if p >= num_classes || a >= num_classes {
            return Err(Error::InvalidArgument(format!("label {} out of range", p.max(a))));
        }
        confusion[a][p] += 1;
    }
    let correct: usize = (0..num_classes).map(|c| confusion[c][c]).sum();
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let per_class = (0..num_classes)
        .map(|c| {
            let tp = confusion[c][c];
            let predicted_c: usize = (0..num_classes).map(|a| confusion[a][c]).sum();
            let support: usize = confusion[c].iter().sum();
            let precision = ratio(tp, predicted_c);
            let recall = ratio(tp, support);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassMetrics {
                precision,
                recall,
                f1,
                support,
            }
        })
        .collect();
    Ok(Classification {
        accuracy: correct as f64 / predicted.len() as f64,
        per_class,
        confusion,
    })
}

pub fn predictions(params: &ParamSet, samples: &[Sample]) -> Result<Vec<usize>> {
    samples.iter().map(|s| predict(params, &s.features)).collect()
}

pub fn evaluate_model(params: &ParamSet, samples: &[Sample]) -> Result<Classification> {
    let predicted = predictions(params, samples)?;
    let actual: Vec<usize> = samples.iter().map(|s| s.label).collect();
    classification_metrics(&predicted, &actual, params.config().num_classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn majority_predictor_on_balanced_set() {
        let actual = [0, 1, 0, 1, 0, 1];
        let m = classification_metrics(&[0; 6], &actual, 2).unwrap();
        assert_eq!(m.accuracy, 0.5);
        assert_eq!(m.per_class[0].recall, 1.0);
        assert_eq!(m.per_class[0].precision, 0.5);
        assert_eq!(m.per_class[1].f1, 0.0);
        assert!(classification_metrics(&[], &[], 2).is_err());
    }

    #[test]
    fn per_class_against_hand_count() {
        // true:  0 0 0 1 1 2
        // pred:  0 1 0 1 2 2
        let m = classification_metrics(&[0, 1, 0, 1, 2, 2], &[0, 0, 0, 1, 1, 2], 3).unwrap();
        assert_eq!(m.confusion, vec![vec![2, 1, 0], vec![0, 1, 1], vec![0, 0, 1]]);
        assert!((m.accuracy - 4.0 / 6.0).abs() < 1e-15);
        assert!((m.per_class[1].precision - 0.5).abs() < 1e-15);
        assert!((m.per_class[1].recall - 0.5).abs() < 1e-15);
        assert!((m.per_class[0].f1 - 0.8).abs() < 1e-15);
    }
}
