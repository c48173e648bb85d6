use super::{matmul, matmul_backward, softmax_cols, softmax_cols_backward, softmax_rows, softmax_rows_backward, DenseArray};
use crate::error::Result;

/// A recorded application of a primitive op: enough saved input to replay
/// the forward pass and to run its adjoint.
#[derive(Debug, Clone)]
pub enum AdjointRecord {
    Matmul { a: DenseArray, b: DenseArray },
    SoftmaxRows { input: DenseArray },
    SoftmaxCols { input: DenseArray },
}

impl AdjointRecord {
    pub fn op_id(&self) -> &'static str {
        match self {
            AdjointRecord::Matmul { .. } => "matmul",
            AdjointRecord::SoftmaxRows { .. } => "softmax_rows",
            AdjointRecord::SoftmaxCols { .. } => "softmax_cols",
        }
    }

    pub fn inputs(&self) -> Vec<&DenseArray> {
        match self {
            AdjointRecord::Matmul { a, b } => vec![a, b],
            AdjointRecord::SoftmaxRows { input } | AdjointRecord::SoftmaxCols { input } => vec![input],
        }
    }

    /// Same record with input `idx` replaced.
    pub fn with_input(&self, idx: usize, value: DenseArray) -> Self {
        let mut rec = self.clone();
        match &mut rec {
            AdjointRecord::Matmul { a, b } => *(if idx == 0 { a } else { b }) = value,
            AdjointRecord::SoftmaxRows { input } | AdjointRecord::SoftmaxCols { input } => *input = value,
        }
        rec
    }

    pub fn forward(&self) -> Result<DenseArray> {
        match self {
            AdjointRecord::Matmul { a, b } => matmul(a, b),
            AdjointRecord::SoftmaxRows { input } => Ok(softmax_rows(input)),
            AdjointRecord::SoftmaxCols { input } => Ok(softmax_cols(input)),
        }
    }

    /// Gradients with respect to each saved input, in `inputs()` order.
    pub fn backward(&self, g: &DenseArray) -> Result<Vec<DenseArray>> {
        match self {
            AdjointRecord::Matmul { a, b } => {
                let (da, db) = matmul_backward(a, b, g)?;
                Ok(vec![da, db])
            }
            AdjointRecord::SoftmaxRows { input } => {
                Ok(vec![softmax_rows_backward(&softmax_rows(input), g)])
            }
            AdjointRecord::SoftmaxCols { input } => {
                Ok(vec![softmax_cols_backward(&softmax_cols(input), g)])
            }
        }
    }
}
