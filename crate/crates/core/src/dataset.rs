use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Feature matrix with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledData {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledData {
    pub fn new(features: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let (n, _) = features.matrix_dims("dataset")?;
        if n != labels.len() {
            return Err(Error::Data(format!(
                "{n} feature rows but {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Data(format!("label {bad} outside 0..{num_classes}")));
        }
        Ok(LabeledData {
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn one_hot(&self) -> Tensor {
        one_hot(&self.labels, self.num_classes)
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledData {
        LabeledData {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Per-class sample counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

pub fn one_hot(labels: &[usize], num_classes: usize) -> Tensor {
    let mut data = vec![0.0; labels.len() * num_classes];
    for (r, &y) in labels.iter().enumerate() {
        data[r * num_classes + y] = 1.0;
    }
    if labels.is_empty() {
        return Tensor::empty_rows(num_classes);
    }
    Tensor::new(vec![labels.len(), num_classes], data).expect("one-hot shape")
}
