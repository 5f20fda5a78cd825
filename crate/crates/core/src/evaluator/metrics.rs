use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Counts with rows = truth, columns = prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new<S: ToString>(classes: &[S]) -> Self {
        let k = classes.len();
        ConfusionMatrix {
            classes: classes.iter().map(ToString::to_string).collect(),
            counts: vec![vec![0; k]; k],
        }
    }

    /// Square matrix from raw counts.
    pub fn from_counts<S: ToString>(classes: &[S], counts: Vec<Vec<u64>>) -> Result<Self> {
        let k = classes.len();
        if counts.len() != k || counts.iter().any(|r| r.len() != k) {
            return Err(Error::InvalidArgument(format!(
                "confusion matrix must be {k}x{k}"
            )));
        }
        Ok(ConfusionMatrix {
            classes: classes.iter().map(ToString::to_string).collect(),
            counts,
        })
    }

    pub fn k(&self) -> usize {
        self.classes.len()
    }

    pub fn add(&mut self, truth: usize, predicted: usize) {
        self.counts[truth][predicted] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k()).map(|i| self.counts[i][i]).sum()
    }

    pub fn tp(&self, i: usize) -> u64 {
        self.counts[i][i]
    }

    pub fn fn_(&self, i: usize) -> u64 {
        self.counts[i].iter().sum::<u64>() - self.counts[i][i]
    }

    pub fn fp(&self, i: usize) -> u64 {
        self.counts.iter().map(|r| r[i]).sum::<u64>() - self.counts[i][i]
    }

    pub fn tn(&self, i: usize) -> u64 {
        self.total() - self.tp(i) - self.fn_(i) - self.fp(i)
    }

    pub fn row_sum(&self, i: usize) -> u64 {
        self.counts[i].iter().sum()
    }

    pub fn col_sum(&self, j: usize) -> u64 {
        self.counts.iter().map(|r| r[j]).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub support: u64,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: Vec<ClassMetrics>,
    /// Number of classes with at least one truth sample; the macro denominator.
    pub k: usize,
    pub macro_recall: f64,
    pub macro_precision: f64,
    pub macro_f1: f64,
    pub correct: u64,
    pub total: u64,
    pub overall_accuracy: f64,
}

impl MetricsReport {
    pub fn recall_of(&self, class: &str) -> Option<f64> {
        self.per_class
            .iter()
            .find(|c| c.class == class && c.support > 0)
            .map(|c| c.recall)
    }

    /// Case counts in the `234/254` style.
    pub fn overall_fraction(&self) -> String {
        format!("{}/{}", self.correct, self.total)
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class recall, precision and F1 plus their macro averages. Classes without
/// truth samples are left out of the averages. Precision with no predictions and F1
/// with P + R = 0 are taken as 0.
pub fn compute_metrics(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let total = cm.total();
    if cm.k() == 0 || total == 0 {
        return Err(Error::Empty("confusion matrix"));
    }
    let mut per_class = Vec::with_capacity(cm.k());
    let (mut sr, mut sp, mut sf, mut k) = (0.0, 0.0, 0.0, 0usize);
    for i in 0..cm.k() {
        let tp = cm.tp(i);
        let support = tp + cm.fn_(i);
        let recall = ratio(tp, support);
        let precision = ratio(tp, tp + cm.fp(i));
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        if support > 0 {
            k += 1;
            sr += recall;
            sp += precision;
            sf += f1;
        } else {
            log::debug!("class {} has no samples; left out of macro averages", cm.classes[i]);
        }
        per_class.push(ClassMetrics {
            class: cm.classes[i].clone(),
            support,
            recall,
            precision,
            f1,
        });
    }
    let kf = k as f64;
    Ok(MetricsReport {
        per_class,
        k,
        macro_recall: sr / kf,
        macro_precision: sp / kf,
        macro_f1: sf / kf,
        correct: cm.trace(),
        total,
        overall_accuracy: cm.trace() as f64 / total as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_is_perfect() {
        let cm = ConfusionMatrix::from_counts(&["a", "b"], vec![vec![3, 0], vec![0, 4]]).unwrap();
        let r = compute_metrics(&cm).unwrap();
        assert_eq!(
            (r.macro_recall, r.macro_precision, r.macro_f1, r.overall_accuracy),
            (1.0, 1.0, 1.0, 1.0)
        );
    }

    #[test]
    fn three_class_example() {
        let cm = ConfusionMatrix::from_counts(
            &["a", "b", "c"],
            vec![vec![2, 1, 0], vec![0, 3, 0], vec![1, 0, 4]],
        )
        .unwrap();
        let r = compute_metrics(&cm).unwrap();
        let recalls: Vec<f64> = r.per_class.iter().map(|c| c.recall).collect();
        assert!((recalls[0] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(recalls[1], 1.0);
        assert!((recalls[2] - 0.8).abs() < 1e-15);
        assert!((r.macro_recall - 0.822_222_222_222_222_2).abs() < 1e-12);
        // precision: a 2/3, b 3/4, c 4/4
        assert!((r.macro_precision - (2.0 / 3.0 + 0.75 + 1.0) / 3.0).abs() < 1e-12);
        assert_eq!((r.correct, r.total), (9, 11));
        assert_eq!(cm.tn(0), 11 - 2 - 1 - 1);
    }

    #[test]
    fn overall_fraction_format() {
        let mut counts = vec![vec![0u64; 5]; 5];
        counts[0][0] = 234;
        counts[1][0] = 20;
        let cm = ConfusionMatrix::from_counts(&["G", "A", "O", "M", "L"], counts).unwrap();
        let r = compute_metrics(&cm).unwrap();
        assert_eq!(r.overall_fraction(), "234/254");
        assert!((r.overall_accuracy - 0.9213).abs() < 1e-4);
        // Three classes without support.
        assert_eq!(r.k, 2);
    }

    #[test]
    fn empty_matrix_errors() {
        let cm = ConfusionMatrix::new(&["a", "b"]);
        assert!(compute_metrics(&cm).is_err());
        assert!(ConfusionMatrix::from_counts(&["a"], vec![vec![1, 2]]).is_err());
    }
}
