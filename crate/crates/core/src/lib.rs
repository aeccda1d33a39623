//! Training and analysis workbench for Jacobian-regularized classifier
//! ensembles: a small reverse-mode autodiff engine that stays differentiable
//! through its own backward pass, MLP/LeNet models, ensemble constructions,
//! universal perturbation attacks, robustness reporting, and Monte Carlo
//! verification of the analytic norm bounds.

pub mod autodiff;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod evaluation;
pub mod jacobian;
pub mod models;
pub mod rng;
pub mod tensor;
pub mod theory;
pub mod training;
pub mod uap;

pub use autodiff::{Graph, GradMap, NodeId};
pub use error::{Error, Result};
pub use tensor::Tensor;
