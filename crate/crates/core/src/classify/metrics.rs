use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    /// Mean of per-class accuracies over classes present in the truth.
    pub macro_accuracy: f64,
    /// `None` for classes without test samples.
    pub per_class: Vec<Option<f64>>,
    /// `confusion[truth][predicted]` counts.
    pub confusion: Vec<Vec<usize>>,
}

pub fn evaluate(predicted: &[usize], truth: &[usize], n_classes: usize) -> Result<Metrics> {
    if predicted.len() != truth.len() {
        return Err(Error::Input(format!(
            "{} predictions for {} labels",
            predicted.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::Input("nothing to evaluate".into()));
    }
    let mut confusion = vec![vec![0usize; n_classes]; n_classes];
    for (&p, &t) in predicted.iter().zip(truth) {
        if p >= n_classes || t >= n_classes {
            return Err(Error::Input(format!("label outside {n_classes} classes")));
        }
        confusion[t][p] += 1;
    }
    let correct: usize = (0..n_classes).map(|c| confusion[c][c]).sum();
    let per_class: Vec<Option<f64>> = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let n: usize = row.iter().sum();
            (n > 0).then(|| row[c] as f64 / n as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    Ok(Metrics {
        accuracy: correct as f64 / truth.len() as f64,
        macro_accuracy: present.iter().sum::<f64>() / present.len() as f64,
        per_class,
        confusion,
    })
}

impl Metrics {
    /// Confusion matrix as CSV: a header of class names, then one row of
    /// predicted counts per true class.
    pub fn confusion_csv(&self, class_names: &[String]) -> String {
        let mut out = String::from("truth");
        for name in class_names {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for (name, row) in class_names.iter().zip(&self.confusion) {
            out.push_str(name);
            for v in row {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let m = evaluate(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.macro_accuracy, 1.0);
        assert_eq!(m.confusion, vec![vec![1, 0, 0], vec![0, 2, 0], vec![0, 0, 1]]);
    }

    #[test]
    fn constant_predictor_on_balanced_pair() {
        let m = evaluate(&[0, 0, 0, 0], &[0, 1, 0, 1], 2).unwrap();
        assert_eq!(m.macro_accuracy, 0.5);
        let rows: Vec<usize> = m.confusion.iter().map(|r| r.iter().sum()).collect();
        assert_eq!(rows, vec![2, 2]);
    }

    #[test]
    fn unknown_label_is_rejected() {
        assert!(evaluate(&[3], &[0], 2).is_err());
    }

    #[test]
    fn csv_layout() {
        let m = evaluate(&[0, 1], &[0, 0], 2).unwrap();
        let csv = m.confusion_csv(&["a".into(), "b".into()]);
        assert_eq!(csv, "truth,a,b\na,1,1\nb,0,0\n");
    }
}
