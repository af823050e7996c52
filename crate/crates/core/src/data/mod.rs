//! Datasets: synthetic generation, binary file formats and report output.

pub mod format;
pub mod report;
pub mod synthetic;

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};

pub use format::{load_checkpoint, load_dataset, save_checkpoint, save_dataset, write_atomic};
pub use report::{emit_report, Report, ReportFormat};
pub use synthetic::{gen_synthetic, watermark_score, SyntheticConfig, Watermarks};

/// Images in `[0,1]` with integer class labels, stored sample-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    /// `(channels, height, width)` of each sample.
    pub shape: [usize; 3],
    pub classes: usize,
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
    pub split: String,
    /// Digest of whatever produced the data (generator config, parent model, ...).
    pub source_hash: String,
}

impl LabeledDataset {
    pub fn new(
        shape: [usize; 3],
        classes: usize,
        inputs: Vec<f64>,
        labels: Vec<usize>,
        split: impl Into<String>,
        source_hash: impl Into<String>,
    ) -> Result<Self> {
        let d: usize = shape.iter().product();
        if d == 0 || inputs.len() != d * labels.len() {
            return Err(Error::Shape(format!(
                "{} values for {} samples of shape {shape:?}",
                inputs.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Spec(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Self {
            shape,
            classes,
            inputs,
            labels,
            split: split.into(),
            source_hash: source_hash.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.inputs[i * d..(i + 1) * d]
    }

    /// Stacks the selected samples into a `B×C×H×W` tensor.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        let rows: Vec<&[f64]> = indices.iter().map(|&i| self.sample(i)).collect();
        Tensor::stack(&self.shape, &rows)
    }

    pub fn batch_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    pub fn all(&self) -> Result<Tensor> {
        let mut shape = vec![self.len()];
        shape.extend_from_slice(&self.shape);
        Tensor::new(shape, self.inputs.clone())
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    pub fn class_indices(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut inputs = Vec::with_capacity(indices.len() * self.dim());
        for &i in indices {
            inputs.extend_from_slice(self.sample(i));
        }
        Self {
            shape: self.shape,
            classes: self.classes,
            inputs,
            labels: self.batch_labels(indices),
            split: self.split.clone(),
            source_hash: self.source_hash.clone(),
        }
    }

    pub fn hash(&self) -> String {
        let mut bytes = Vec::with_capacity(self.inputs.len() * 8 + self.labels.len() * 2);
        for v in &self.inputs {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        for &y in &self.labels {
            bytes.extend_from_slice(&(y as u16).to_le_bytes());
        }
        crate::models::hex_digest(&bytes)
    }
}

/// Fraction of samples whose arg-max prediction equals the label.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len() as f64
}
