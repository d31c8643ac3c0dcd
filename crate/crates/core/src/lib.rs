//! Low-rank backpropagation for linear layers using Walsh-Hadamard projections.
//!
//! The gradient with respect to a layer's output and the cached layer input are
//! projected onto a handful of 2D Walsh-Hadamard bases along the token axis, the
//! two backward matrix products run in that low-rank space, and the input
//! gradient is projected back. With every base selected the procedure is exact.
//!
//! Layout convention: feature maps are `L x C` matrices (tokens as rows), so a
//! linear layer computes `y = x * w^T` with `w` of shape `C_y x C_x`,
//! `g_w = g_y^T * x` and `g_x = g_y * w`.

pub mod cli;
pub mod error;
pub mod lbp;
pub mod selection;
pub mod tensor;
pub mod train;
pub mod wht;

pub use error::{Error, Result};
pub use lbp::{FlopReport, Gradients, LinearLayer, BpMode};
pub use selection::{BaseIndexSet, EnergyProfile, Strategy};
pub use tensor::{Matrix, Rng};
pub use wht::{BaseIndex, FlatBase, WhtPlan};
