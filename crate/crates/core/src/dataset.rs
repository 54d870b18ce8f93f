use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Labeled samples; `inputs` is batched as `[N, ...]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Tensor,
    labels: Vec<u32>,
    class_count: usize,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<u32>, class_count: usize) -> Result<Self> {
        if inputs.shape().len() < 2 {
            return Err(Error::InvalidArgument(
                "dataset inputs must be shaped [N, ...]".into(),
            ));
        }
        if labels.len() != inputs.rows() {
            return Err(Error::InvalidArgument(format!(
                "{} labels for {} samples",
                labels.len(),
                inputs.rows()
            )));
        }
        if class_count == 0 {
            return Err(Error::InvalidArgument("class count must be positive".into()));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l as usize >= class_count) {
            return Err(Error::InvalidArgument(format!(
                "label {l} at sample {i} outside [0, {class_count})"
            )));
        }
        Ok(Dataset {
            inputs,
            labels,
            class_count,
        })
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select_rows(rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            class_count: self.class_count,
        }
    }
}
