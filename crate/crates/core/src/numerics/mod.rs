//! Dense `f64` tensors with a recorded tape for reverse-mode gradients.

mod gradcheck;
mod graph;
mod layers;
mod params;
mod tensor;

pub use gradcheck::{grad_check, grad_check_terms, relative_error, GradCheckConfig, GradCheckReport, Objective, ParamCheck};
pub use graph::{clamp_prob, focal, focal_grad, sigmoid, Graph, Var, PROB_EPS};
pub use layers::{
    affine, gru_cell, mlp2, register_affine, register_gru, register_mlp2, AffineVars, GruVars, Mlp2Vars,
};
pub use params::{uniform_init, Gradients, ParamId, ParamStore};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
