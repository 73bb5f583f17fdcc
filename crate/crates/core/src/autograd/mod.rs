//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Graph`] records operations as they execute; [`Graph::backward`] then
//! walks the tape in reverse. Graphs are single-threaded; parameters live in a
//! [`ParamSet`] and are copied into each graph as leaves.

mod adam;
mod graph;
pub mod init;
pub mod kernels;
mod layers;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use graph::{ConvGeom, Gradients, Graph, Var, FLIP_GELU_BACKWARD};
pub use layers::{
    attention, conv2d, grad_check, layer_name, relative_error, standard_layer_set, LayerSpec, GRAD_CHECK_FLOOR,
    GRAD_CHECK_STEP,
};
pub use tensor::{Real, ShapeError, Tensor};

use serde::{Deserialize, Serialize};

/// Named parameter tensors in a fixed order (the checkpoint manifest order).
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamSet<T = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { names: Vec::new(), tensors: Vec::new() }
    }

    /// Returns the index of the new parameter.
    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, i: usize) -> &Tensor<T> {
        &self.tensors[i]
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet { names: self.names.clone(), tensors: self.tensors.iter().map(Tensor::cast).collect() }
    }

    /// Adds every parameter to `g` as a leaf, in order.
    pub fn attach<U: Real>(&self, g: &mut Graph<U>) -> Vec<Var> {
        self.tensors.iter().map(|t| g.leaf(t.cast())).collect()
    }

    /// Gradient for every parameter (zeros where the loss did not reach).
    pub fn gradients(&self, g: &Graph<T>, grads: &Gradients<T>, vars: &[Var]) -> Vec<Tensor<T>> {
        vars.iter().map(|&v| grads.tensor(g, v)).collect()
    }
}
