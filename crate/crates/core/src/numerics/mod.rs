//! Dense tensors, layer primitives with manual backward passes, finite-difference
//! gradient checking and the Adam optimizer.

mod adam;
mod gradcheck;
pub mod layers;
mod ops;
mod tensor;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use gradcheck::{grad_check, GradCheckReport, ParamGradError, FD_STEP};
pub use ops::{dot, layer_norm, matmul, matmul_nt, matmul_tn, softmax, softmax_in_place};
pub use tensor::Tensor;

use crate::scalar::Scalar;

/// A collection of named parameter tensors with a fixed traversal order.
///
/// Gradients are stored in a value of the same type, so the two traversals line up.
pub trait ParamTensors<T: Scalar> {
    fn named_tensors(&self) -> Vec<(String, &Tensor<T>)>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>>;

    /// Zero-valued copy with identical shapes.
    fn zeros_like(&self) -> Self
    where
        Self: Clone,
    {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(T::zero());
        }
        z
    }

    fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Plain ordered list of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamList<T> {
    pub entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> ParamTensors<T> for ParamList<T> {
    fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.clone(), t)).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.entries.iter_mut().map(|(_, t)| t).collect()
    }
}
