//! A desk-scale laboratory for prompt-aligned personalization of toy
//! conditional denoising diffusion models.
//!
//! Everything runs in seconds on a single CPU core: images are 16×16
//! grayscale, the denoiser is a small MLP, and "CLIP" is a set of exact
//! procedural scorers. The point is not fidelity — it is that every gradient,
//! schedule constant, and guidance identity in the training stack is small
//! enough to verify against an independent oracle.

pub mod cli;
pub mod denoiser;
pub mod diffcore;
pub mod diffusion;
pub mod evalkit;
pub mod guidance;
pub mod trainer;

pub use diffcore::{Tape, Tensor};
