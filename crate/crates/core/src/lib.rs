//! Image-instance full alignment for unsupervised domain-adaptive detection.
//!
//! A toy two-stage detector trained on a labeled source domain while
//! adversarial discriminators at the image level and instance level pull its
//! features toward an unlabeled target domain.

pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Graph, ParamId, ParamStore, Tensor, Var};
pub mod alignment;
pub mod detector;
mod layers;
pub mod rng;
pub mod synthdata;
pub mod train;
