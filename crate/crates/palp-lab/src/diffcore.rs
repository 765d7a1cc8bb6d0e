//! Numeric core: dense f64 tensors, a reverse-mode tape, and the
//! finite-difference oracle used to validate every gradient in the crate.

pub mod gradcheck;
pub mod tape;
pub mod tensor;

pub use gradcheck::{check_grad, fd_grad, GradReport, FD_STEP, FD_TOLERANCE};
pub use tape::{GradError, NodeId, Tape};
pub use tensor::Tensor;
