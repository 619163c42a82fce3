//! Sentiment metrics over `(y, y_hat)` pairs.

use serde::{Deserialize, Serialize};

use crate::datagen::{polarity, Polarity};
use crate::error::{Error, Result};

/// Acc-2 and F1 are reported for both binary conventions: negative vs
/// non-negative over all pairs, and negative vs positive over pairs with a
/// non-zero label. F1 is the support-weighted mean of per-class F1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub n: usize,
    pub acc2_non_negative: f64,
    pub f1_non_negative: f64,
    pub acc2_positive: f64,
    pub f1_positive: f64,
    /// Pairs with a non-zero label (the negative/positive subset).
    pub n_nonzero: usize,
    pub acc7: f64,
    pub mae: f64,
    pub corr: f64,
    /// Set when either side has zero variance; `corr` is then 0.
    pub corr_undefined: bool,
}

/// Integer class in `[-3, 3]`, rounding half away from zero.
pub fn seven_class(v: f64) -> i32 {
    v.clamp(-3.0, 3.0).round() as i32
}

fn weighted_f1(truth: &[bool], pred: &[bool]) -> f64 {
    let n = truth.len();
    if n == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for class in [false, true] {
        let tp = truth.iter().zip(pred).filter(|(&t, &p)| t == class && p == class).count() as f64;
        let fp = truth.iter().zip(pred).filter(|(&t, &p)| t != class && p == class).count() as f64;
        let fneg = truth.iter().zip(pred).filter(|(&t, &p)| t == class && p != class).count() as f64;
        let support = truth.iter().filter(|&&t| t == class).count() as f64;
        let f1 = if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fneg) };
        total += support * f1;
    }
    total / n as f64
}

fn accuracy(truth: &[bool], pred: &[bool]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    truth.iter().zip(pred).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64
}

pub fn compute_metrics(pairs: &[(f64, f64)]) -> Result<MetricsRecord> {
    if pairs.is_empty() {
        return Err(Error::contract("metrics over zero pairs"));
    }
    if pairs.iter().any(|(y, p)| !y.is_finite() || !p.is_finite()) {
        return Err(Error::NonFinite("metric inputs".into()));
    }
    let n = pairs.len();
    let nn_truth: Vec<bool> = pairs.iter().map(|(y, _)| polarity(*y) == Polarity::NonNegative).collect();
    let nn_pred: Vec<bool> = pairs.iter().map(|(_, p)| polarity(*p) == Polarity::NonNegative).collect();
    let nonzero: Vec<&(f64, f64)> = pairs.iter().filter(|(y, _)| *y != 0.0).collect();
    let pos_truth: Vec<bool> = nonzero.iter().map(|(y, _)| *y > 0.0).collect();
    let pos_pred: Vec<bool> = nonzero.iter().map(|(_, p)| *p > 0.0).collect();

    let acc7 = pairs.iter().filter(|(y, p)| seven_class(*y) == seven_class(*p)).count() as f64 / n as f64;
    let mae = pairs.iter().map(|(y, p)| (y - p).abs()).sum::<f64>() / n as f64;

    let my = pairs.iter().map(|p| p.0).sum::<f64>() / n as f64;
    let mp = pairs.iter().map(|p| p.1).sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (y, p) in pairs {
        sxy += (y - my) * (p - mp);
        sxx += (y - my) * (y - my);
        syy += (p - mp) * (p - mp);
    }
    let corr_undefined = sxx == 0.0 || syy == 0.0;
    let corr = if corr_undefined {
        0.0
    } else {
        (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)
    };

    Ok(MetricsRecord {
        n,
        acc2_non_negative: accuracy(&nn_truth, &nn_pred),
        f1_non_negative: weighted_f1(&nn_truth, &nn_pred),
        acc2_positive: accuracy(&pos_truth, &pos_pred),
        f1_positive: weighted_f1(&pos_truth, &pos_pred),
        n_nonzero: nonzero.len(),
        acc7,
        mae,
        corr,
        corr_undefined,
    })
}

/// Accuracy of always predicting the more frequent polarity of `train`,
/// evaluated on `test` labels.
pub fn majority_baseline(train: &[f64], test: &[f64]) -> f64 {
    let nn = train.iter().filter(|&&y| polarity(y) == Polarity::NonNegative).count();
    let guess = if 2 * nn >= train.len() {
        Polarity::NonNegative
    } else {
        Polarity::Negative
    };
    if test.is_empty() {
        return 0.0;
    }
    test.iter().filter(|&&y| polarity(y) == guess).count() as f64 / test.len() as f64
}
