//! Photoacoustic tomography with unknown, spatially varying sound speed.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`graph`]), a
//! k-space wave simulator producing Dirichlet boundary sinograms
//! ([`wave`]), phantom and sound-speed generators ([`phantoms`],
//! [`speed`]), the two trainable networks ([`networks`]) and the training
//! and evaluation loops ([`training`]).

pub mod dataset;
pub mod error;
pub mod fft;
pub mod gradcheck;
pub mod graph;
mod kernels;
pub mod networks;
pub mod phantoms;
pub mod selfcheck;
pub mod speed;
pub mod tensor;
pub mod training;
pub mod wave;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use kernels::BilinearTaps;
pub use tensor::{ComplexTensor, Tensor};
