//! Regression and class metrics for sentiment scores.

use serde::{Deserialize, Serialize};

use crate::error::{DmlfError, Result};

pub const ACC5_CENTERS: [f64; 5] = [-2.0, -1.0, 0.0, 1.0, 2.0];
pub const ACC7_CENTERS: [f64; 7] = [-3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0];

/// Accuracies and F1 are fractions in `[0, 1]`. `None` marks an undefined
/// value: Pearson with a constant input, or the non-zero Acc-2 when every
/// label is exactly 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub mae: f64,
    pub corr: Option<f64>,
    /// Negative vs non-negative, all samples.
    pub acc2_has0: f64,
    pub f1_has0: f64,
    /// Negative vs positive, samples with a non-zero label only.
    pub acc2_non0: Option<f64>,
    pub f1_non0: Option<f64>,
    pub acc5: f64,
    pub acc7: f64,
}

/// Index of the nearest center; ties go to the lower center.
pub fn nearest_class(x: f64, centers: &[f64]) -> usize {
    let mut best = 0;
    for (i, c) in centers.iter().enumerate().skip(1) {
        if (x - c).abs() < (x - centers[best]).abs() {
            best = i;
        }
    }
    best
}

pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    (saa > 0.0 && sbb > 0.0).then(|| sab / (saa.sqrt() * sbb.sqrt()))
}

/// Support-weighted F1 over the two classes.
pub fn weighted_f1_binary(pred: &[bool], truth: &[bool]) -> f64 {
    let mut total = 0.0;
    for class in [false, true] {
        let tp = pred.iter().zip(truth).filter(|(p, t)| **p == class && **t == class).count();
        let fp = pred.iter().zip(truth).filter(|(p, t)| **p == class && **t != class).count();
        let fneg = pred.iter().zip(truth).filter(|(p, t)| **p != class && **t == class).count();
        let support = truth.iter().filter(|t| **t == class).count();
        let denom = 2 * tp + fp + fneg;
        if denom > 0 {
            total += support as f64 * (2 * tp) as f64 / denom as f64;
        }
    }
    total / truth.len() as f64
}

fn accuracy<T: PartialEq>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / a.len() as f64
}

fn class_accuracy(preds: &[f64], labels: &[f64], centers: &[f64]) -> f64 {
    let p: Vec<usize> = preds.iter().map(|&x| nearest_class(x, centers)).collect();
    let l: Vec<usize> = labels.iter().map(|&x| nearest_class(x, centers)).collect();
    accuracy(&p, &l)
}

pub fn compute_metrics(preds: &[f32], labels: &[f32]) -> Result<MetricsReport> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(DmlfError::Data(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let p: Vec<f64> = preds.iter().map(|&x| f64::from(x)).collect();
    let l: Vec<f64> = labels.iter().map(|&x| f64::from(x)).collect();
    let n = p.len();
    let mae = p.iter().zip(&l).map(|(a, b)| (a - b).abs()).sum::<f64>() / n as f64;

    let ph: Vec<bool> = p.iter().map(|x| *x >= 0.0).collect();
    let lh: Vec<bool> = l.iter().map(|x| *x >= 0.0).collect();

    let nz: Vec<usize> = (0..n).filter(|&i| l[i] != 0.0).collect();
    let (acc2_non0, f1_non0) = if nz.is_empty() {
        (None, None)
    } else {
        let pn: Vec<bool> = nz.iter().map(|&i| p[i] > 0.0).collect();
        let ln: Vec<bool> = nz.iter().map(|&i| l[i] > 0.0).collect();
        (Some(accuracy(&pn, &ln)), Some(weighted_f1_binary(&pn, &ln)))
    };

    Ok(MetricsReport {
        n,
        mae,
        corr: pearson(&p, &l),
        acc2_has0: accuracy(&ph, &lh),
        f1_has0: weighted_f1_binary(&ph, &lh),
        acc2_non0,
        f1_non0,
        acc5: class_accuracy(&p, &l, &ACC5_CENTERS),
        acc7: class_accuracy(&p, &l, &ACC7_CENTERS),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_go_to_the_lower_center() {
        assert_eq!(nearest_class(0.5, &ACC7_CENTERS), 3);
        assert_eq!(nearest_class(-0.5, &ACC7_CENTERS), 2);
        assert_eq!(nearest_class(-9.0, &ACC7_CENTERS), 0);
        assert_eq!(nearest_class(2.6, &ACC5_CENTERS), 4);
    }

    #[test]
    fn perfect_predictions() {
        let y = [-2.0, -0.5, 0.0, 1.5, 3.0];
        let m = compute_metrics(&y, &y).unwrap();
        assert_eq!(m.mae, 0.0);
        assert!((m.corr.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!((m.acc2_has0, m.f1_has0, m.acc5, m.acc7), (1.0, 1.0, 1.0, 1.0));
        assert_eq!((m.acc2_non0, m.f1_non0), (Some(1.0), Some(1.0)));
    }

    #[test]
    fn zero_labels_split_the_conventions() {
        let m = compute_metrics(&[0.2, 0.3], &[0.0, 0.0]).unwrap();
        assert_eq!(m.acc2_has0, 1.0);
        assert_eq!(m.acc2_non0, None);
        let m = compute_metrics(&[-0.1, 1.0], &[0.0, 1.0]).unwrap();
        assert_eq!(m.acc2_has0, 0.5);
        assert_eq!(m.acc2_non0, Some(1.0));
    }

    #[test]
    fn constant_input_has_no_correlation() {
        assert_eq!(pearson(&[1.0, 1.0, 1.0], &[0.0, 1.0, 2.0]), None);
        let m = compute_metrics(&[0.5; 4], &[1.0, -1.0, 2.0, 0.0]).unwrap();
        assert_eq!(m.corr, None);
    }

    #[test]
    fn weighted_f1_by_hand() {
        // class true: tp 2 fp 1 fn 0 -> 0.8, support 2; class false: tp 0 fp 0 fn 1 -> 0, support 1
        let f1 = weighted_f1_binary(&[true, true, true], &[true, true, false]);
        assert!((f1 - 0.8 * 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(compute_metrics(&[1.0], &[1.0, 2.0]).is_err());
        assert!(compute_metrics(&[], &[]).is_err());
    }
}
