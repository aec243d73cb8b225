//! A compact CPU tensor library with tape-based reverse-mode autodiff,
//! sized for the small convolutional networks used in desk-scale
//! diffusion and restoration experiments.
//!
//! Convolutions lower to im2col + GEMM per sample, so a network without
//! cross-sample ops produces bit-identical outputs regardless of how inputs
//! are batched.

pub mod conv;
pub mod error;
pub mod float;
pub mod io;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use error::{NnError, Result};
pub use float::Float;
pub use layers::{Conv2d, GroupNorm, Init, Linear};
pub use optim::{clip_grad_norm, AdamW, AdamWConfig, LrSchedule};
pub use params::{ParamId, ParamStore, Params};
pub use tape::{Grads, Tape, Var};
pub use tensor::Tensor;
