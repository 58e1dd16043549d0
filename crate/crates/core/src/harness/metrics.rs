use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::mixture::argmax;
use crate::models::{ClassifierHead, Encoder};
use crate::trainer::predict;

/// Rows are ground truth, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(class_count: usize) -> Self {
        ConfusionMatrix {
            counts: vec![vec![0; class_count]; class_count],
        }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let k = counts.len();
        if k == 0 || counts.iter().any(|row| row.len() != k) {
            return Err(Error::invalid("confusion matrix must be square and nonempty"));
        }
        Ok(ConfusionMatrix { counts })
    }

    pub fn class_count(&self) -> usize {
        self.counts.len()
    }

    pub fn record(&mut self, truth: usize, predicted: usize) {
        self.counts[truth][predicted] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.class_count()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            self.trace() as f64 / total as f64
        }
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.class_count() != self.class_count() {
            return Err(Error::invalid("cannot merge confusion matrices of different sizes"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: u64,
    pub label: usize,
    pub predicted: usize,
    pub probs: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
    pub predictions: Vec<Prediction>,
}

/// Eval-mode predictions over `split`; ties go to the lowest class index.
pub fn evaluate(encoder: &Encoder<f32>, head: &mut ClassifierHead<f32>, split: &Dataset) -> Result<Evaluation> {
    if split.is_empty() {
        return Err(Error::Data("cannot evaluate an empty split".into()));
    }
    let probs = predict(encoder, head, split)?;
    let mut confusion = ConfusionMatrix::new(head.class_count());
    let mut predictions = Vec::with_capacity(split.len());
    for (i, s) in split.samples.iter().enumerate() {
        let row = probs.row(i);
        let predicted = argmax(row);
        confusion.record(s.label, predicted);
        predictions.push(Prediction {
            id: s.id,
            label: s.label,
            predicted,
            probs: row.to_vec(),
        });
    }
    Ok(Evaluation {
        accuracy: confusion.accuracy(),
        confusion,
        predictions,
    })
}

/// Mean with both spreads. The population sd is the one matching the
/// "mean ± sd" convention of the published table.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub sample_sd: f64,
    pub population_sd: f64,
}

pub fn aggregate_folds(values: &[f64]) -> Result<Aggregate> {
    if values.len() < 2 {
        return Err(Error::invalid(format!(
            "aggregation needs at least 2 folds, got {}",
            values.len()
        )));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    Ok(Aggregate {
        mean,
        sample_sd: (ss / (n - 1.0)).sqrt(),
        population_sd: (ss / n).sqrt(),
    })
}
