//! Accuracy, confusion matrices and the files written by `eval`.

use serde_json::json;

use crate::corpus::{batch_examples, EncodedExample, LabelSet};
use crate::error::{Error, Result};
use crate::model::{argmax_rows, Layout, Model};
use crate::tensor::Tape;
use crate::training::classifier::predict;

/// Fraction of positions where `predictions` equals `labels`.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Data(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Data("accuracy of an empty set".into()));
    }
    let hits = predictions.iter().zip(labels).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / labels.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub labels: Vec<String>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub accuracy: f64,
    pub support: Vec<usize>,
}

pub fn confusion_matrix(predictions: &[usize], labels: &[usize], label_set: &LabelSet) -> Result<EvalReport> {
    let n = label_set.len();
    let accuracy = accuracy(predictions, labels)?;
    let mut confusion = vec![vec![0usize; n]; n];
    for (&p, &y) in predictions.iter().zip(labels) {
        if p >= n || y >= n {
            return Err(Error::Data(format!("label index out of range for {n} labels")));
        }
        confusion[y][p] += 1;
    }
    let support = confusion.iter().map(|row| row.iter().sum()).collect();
    Ok(EvalReport {
        labels: label_set.names().to_vec(),
        confusion,
        accuracy,
        support,
    })
}

impl EvalReport {
    pub fn total(&self) -> usize {
        self.support.iter().sum()
    }

    pub fn diagonal(&self) -> usize {
        (0..self.labels.len()).map(|i| self.confusion[i][i]).sum()
    }

    /// Classes never predicted get precision 0.
    pub fn per_class_precision(&self) -> Vec<f64> {
        (0..self.labels.len())
            .map(|j| {
                let predicted: usize = self.confusion.iter().map(|row| row[j]).sum();
                if predicted == 0 {
                    0.0
                } else {
                    self.confusion[j][j] as f64 / predicted as f64
                }
            })
            .collect()
    }

    /// Classes with no support get recall 0.
    pub fn per_class_recall(&self) -> Vec<f64> {
        (0..self.labels.len())
            .map(|i| {
                if self.support[i] == 0 {
                    0.0
                } else {
                    self.confusion[i][i] as f64 / self.support[i] as f64
                }
            })
            .collect()
    }

    pub fn metrics_json(&self) -> serde_json::Value {
        let by_label = |values: Vec<f64>| -> serde_json::Map<String, serde_json::Value> {
            self.labels.iter().cloned().zip(values.into_iter().map(|v| json!(v))).collect()
        };
        json!({
            "accuracy": self.accuracy,
            "per_class_precision": by_label(self.per_class_precision()),
            "per_class_recall": by_label(self.per_class_recall()),
            "support": self.labels.iter().cloned().zip(self.support.iter().map(|s| json!(s))).collect::<serde_json::Map<_, _>>(),
        })
    }

    /// Rows are true labels (with support), columns are predicted labels.
    pub fn confusion_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["true \\ predicted".to_string()];
        header.extend(self.labels.iter().cloned());
        w.write_record(&header).map_err(csv_error)?;
        for (i, row) in self.confusion.iter().enumerate() {
            let mut record = vec![format!("{} ({})", self.labels[i], self.support[i])];
            record.extend(row.iter().map(usize::to_string));
            w.write_record(&record).map_err(csv_error)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::Data(e.to_string())
}

/// Predictions for `examples`, in order, plus an attention CSV when requested:
/// one row per example and fact with a column per memory pass.
pub fn predict_examples(
    model: &Model,
    examples: &[EncodedExample],
    batch_size: usize,
    emit_attention: bool,
) -> Result<(Vec<usize>, Option<String>)> {
    let mut predictions = Vec::with_capacity(examples.len());
    let mut attention = emit_attention.then(|| {
        let passes: Vec<String> = (1..=model.config.memory_passes).map(|t| format!("pass{t}")).collect();
        format!("example,fact,source,{}\n", passes.join(","))
    });
    for batch in batch_examples(examples, batch_size, None)? {
        let offset = predictions.len();
        let layout = Layout::new(&batch)?;
        let mut tape = Tape::new();
        let p = model.store.bind(&mut tape);
        let out = model.forward(&mut tape, &p, &layout, None, None)?;
        let probs = predict(&mut tape, out.logits)?;
        predictions.extend(argmax_rows(tape.value(probs)));
        if let Some(csv) = attention.as_mut() {
            let k = out.fact_slots;
            for i in 0..layout.batch {
                for f in 0..k {
                    if !out.fact_mask[i * k + f] {
                        continue;
                    }
                    let source = if f < out.utterance_facts[i] {
                        "utterance"
                    } else {
                        "history"
                    };
                    let weights: Vec<String> = out
                        .attention
                        .iter()
                        .map(|a| tape.value(*a).data()[i * k + f].to_string())
                        .collect();
                    csv.push_str(&format!("{},{},{},{}\n", offset + i, f, source, weights.join(",")));
                }
            }
        }
    }
    Ok((predictions, attention))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(names: &[&str]) -> LabelSet {
        LabelSet::new(names.iter().map(|s| s.to_string()).collect()).unwrap()
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[1, 2, 2, 0], &[1, 2, 0, 0]).unwrap(), 0.75);
        assert_eq!(accuracy(&[3, 1], &[3, 1]).unwrap(), 1.0);
        assert!(accuracy(&[], &[]).is_err());
        assert!(accuracy(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn confusion_examples() {
        let set = labels(&["a", "b"]);
        let r = confusion_matrix(&[0, 0], &[0, 1], &set).unwrap();
        assert_eq!(r.confusion, vec![vec![1, 0], vec![1, 0]]);
        let perfect = confusion_matrix(&[0, 1, 1], &[0, 1, 1], &set).unwrap();
        assert_eq!(perfect.confusion, vec![vec![1, 0], vec![0, 2]]);
        assert_eq!(perfect.support, vec![1, 2]);
    }

    #[test]
    fn report_is_self_consistent() {
        let set = labels(&["x", "y", "z"]);
        let pred = [0, 1, 2, 2, 1, 0, 0, 2];
        let gold = [0, 1, 1, 2, 2, 0, 1, 2];
        let r = confusion_matrix(&pred, &gold, &set).unwrap();
        assert_eq!(r.total(), 8);
        assert_eq!(r.diagonal() as f64 / r.total() as f64, r.accuracy);
        assert_eq!(r.accuracy, accuracy(&pred, &gold).unwrap());
        // y: predicted 2 times, correct once; true 3 times
        assert_eq!(r.per_class_precision()[1], 0.5);
        assert!((r.per_class_recall()[1] - 1.0 / 3.0).abs() < 1e-15);
        let m = r.metrics_json();
        assert_eq!(m["support"]["y"], 3);
        assert_eq!(m["accuracy"], 0.625);
    }

    #[test]
    fn confusion_csv_has_label_headers() {
        let set = labels(&["a", "b,c"]);
        let r = confusion_matrix(&[0, 1], &[0, 0], &set).unwrap();
        let csv = r.confusion_csv().unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "true \\ predicted,a,\"b,c\"");
        assert_eq!(lines[1], "a (2),1,1");
        assert_eq!(lines[2], "\"b,c (0)\",0,0");
    }
}
