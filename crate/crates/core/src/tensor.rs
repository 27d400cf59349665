//! Dense row-major `f64` tensors and named parameter sets.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensorio::{TensorArchive, TensorEntry};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::DimMismatch {
                expected: numel,
                got: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// True when the trailing two dimensions are 3×3 and rank ≥ 2.
    pub fn has_3x3_slices(&self) -> bool {
        trailing_3x3(&self.shape)
    }
}

pub(crate) fn trailing_3x3(shape: &[usize]) -> bool {
    shape.len() >= 2 && shape[shape.len() - 2..] == [3, 3]
}

/// Ordered map from parameter name to tensor.
pub type ParamSet = IndexMap<String, Tensor>;

/// Converts parameters to an `f32` archive, keeping insertion order.
pub fn params_to_archive(params: &ParamSet) -> TensorArchive {
    let entries = params
        .iter()
        .map(|(name, t)| TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&v| v as f32).collect(),
        })
        .collect();
    TensorArchive { entries }
}

pub fn archive_to_params(archive: &TensorArchive) -> ParamSet {
    archive
        .entries
        .iter()
        .map(|e| {
            let t = Tensor {
                shape: e.shape.clone(),
                data: e.data.iter().map(|&v| v as f64).collect(),
            };
            (e.name.clone(), t)
        })
        .collect()
}
