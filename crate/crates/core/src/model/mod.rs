//! Encoder, combination operators, pretraining heads and feature containers.

mod encoder;
mod heads;
mod operator;

pub use encoder::{windows_to_tensor, Encoder, EncoderConfig};
pub use heads::{HeadsSize, PretrainHeads};
pub use operator::{combine, combine_all_pairs, CombinationOperator, OperatorKind, SyntheticFeature};

use thiserror::Error;

use crate::data::GestureLabel;
use crate::nncore::{NnError, Tensor};

/// Width of every feature vector produced by the encoder.
pub const FEATURE_DIM: usize = 64;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("label error: {0}")]
    Label(String),
    #[error("shape error: {0}")]
    Shape(String),
}

/// Feature rows `[n, dim]` with one label per row.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledFeatures {
    pub z: Tensor<f32>,
    pub labels: Vec<GestureLabel>,
}

impl LabeledFeatures {
    pub fn new(z: Tensor<f32>, labels: Vec<GestureLabel>) -> Result<Self, ModelError> {
        if z.shape().len() != 2 || z.shape()[0] != labels.len() {
            return Err(ModelError::Shape(format!("{} labels for features of shape {:?}", labels.len(), z.shape())));
        }
        Ok(LabeledFeatures { z, labels })
    }

    pub fn empty(dim: usize) -> Self {
        LabeledFeatures { z: Tensor::zeros(&[0, dim]), labels: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.z.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[f32] {
        self.z.row(i)
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        let dim = self.dim();
        let mut data = Vec::with_capacity(indices.len() * dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        LabeledFeatures {
            z: Tensor::new(vec![indices.len(), dim], data).expect("row count matches"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Row indices whose label satisfies `keep`.
    pub fn indices_where(&self, keep: impl Fn(GestureLabel) -> bool) -> Vec<usize> {
        (0..self.len()).filter(|&i| keep(self.labels[i])).collect()
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn concat(&self, other: &LabeledFeatures) -> Result<Self, ModelError> {
        if self.dim() != other.dim() {
            return Err(ModelError::Shape(format!("cannot stack dims {} and {}", self.dim(), other.dim())));
        }
        let mut data = self.z.data().to_vec();
        data.extend_from_slice(other.z.data());
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        LabeledFeatures::new(Tensor::new(vec![labels.len(), self.dim()], data)?, labels)
    }
}
