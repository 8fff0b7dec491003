//! Confusion matrices and one-vs-rest classification metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows are gold labels, columns are predicted labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<u8>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn class_index(&self, label: u8) -> Option<usize> {
        self.classes.iter().position(|&c| c == label)
    }

    pub fn support(&self, k: usize) -> u64 {
        self.counts[k].iter().sum()
    }

    pub fn predicted(&self, k: usize) -> u64 {
        self.counts.iter().map(|row| row[k]).sum()
    }
}

pub fn confusion(gold: &[u8], pred: &[u8], classes: &[u8]) -> Result<ConfusionMatrix> {
    if gold.len() != pred.len() {
        return Err(Error::Argument(format!(
            "gold has {} labels, predictions have {}",
            gold.len(),
            pred.len()
        )));
    }
    let mut index = [usize::MAX; 256];
    for (i, &c) in classes.iter().enumerate() {
        if index[c as usize] != usize::MAX {
            return Err(Error::Argument(format!("class {c} listed twice")));
        }
        index[c as usize] = i;
    }
    let n = classes.len();
    let mut counts = vec![vec![0u64; n]; n];
    for (i, (&g, &p)) in gold.iter().zip(pred).enumerate() {
        let (gi, pi) = (index[g as usize], index[p as usize]);
        if gi == usize::MAX || pi == usize::MAX {
            let bad = if gi == usize::MAX { g } else { p };
            return Err(Error::Argument(format!(
                "label {bad} at position {i} is not one of {classes:?}"
            )));
        }
        counts[gi][pi] += 1;
    }
    Ok(ConfusionMatrix {
        classes: classes.to_vec(),
        counts,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class: u8,
    pub support: u64,
    pub predicted: u64,
    pub precision: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub per_class: Vec<ClassScore>,
    /// Averages over classes with nonzero gold support.
    pub macro_precision: f64,
    pub macro_sensitivity: f64,
    pub macro_specificity: f64,
    pub macro_f1: f64,
}

impl ClassMetrics {
    pub fn class(&self, label: u8) -> Option<&ClassScore> {
        self.per_class.iter().find(|c| c.class == label)
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn per_class_metrics(cm: &ConfusionMatrix) -> Result<ClassMetrics> {
    let total = cm.total();
    if cm.classes.is_empty() || total == 0 {
        return Err(Error::Argument("confusion matrix is empty".into()));
    }
    let per_class: Vec<ClassScore> = (0..cm.classes.len())
        .map(|k| {
            let tp = cm.counts[k][k];
            let support = cm.support(k);
            let predicted = cm.predicted(k);
            let fp = predicted - tp;
            let fn_ = support - tp;
            let tn = total - tp - fp - fn_;
            ClassScore {
                class: cm.classes[k],
                support,
                predicted,
                precision: ratio(tp, predicted),
                sensitivity: ratio(tp, support),
                specificity: ratio(tn, tn + fp),
                // 2TP / (2TP + FP + FN), which is the harmonic mean of precision and sensitivity.
                f1: ratio(2 * tp, support + predicted),
            }
        })
        .collect();

    let supported: Vec<&ClassScore> = per_class.iter().filter(|c| c.support > 0).collect();
    let mean = |f: fn(&ClassScore) -> f64| supported.iter().map(|c| f(c)).sum::<f64>() / supported.len() as f64;
    Ok(ClassMetrics {
        macro_precision: mean(|c| c.precision),
        macro_sensitivity: mean(|c| c.sensitivity),
        macro_specificity: mean(|c| c.specificity),
        macro_f1: mean(|c| c.f1),
        per_class,
    })
}

/// How a single F1 number is obtained from a confusion matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum F1Average {
    /// Unweighted mean over classes present in gold.
    Macro,
    /// F1 of one positive class.
    Binary { positive: u8 },
}

impl F1Average {
    pub fn score(self, metrics: &ClassMetrics) -> f64 {
        match self {
            F1Average::Macro => metrics.macro_f1,
            F1Average::Binary { positive } => metrics.class(positive).map_or(0.0, |c| c.f1),
        }
    }
}

/// Macro-F1 of `pred` against `gold` over `classes`.
pub fn macro_f1(gold: &[u8], pred: &[u8], classes: &[u8]) -> Result<f64> {
    Ok(per_class_metrics(&confusion(gold, pred, classes)?)?.macro_f1)
}
