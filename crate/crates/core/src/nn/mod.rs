//! Minimal differentiable substrate: tensors, layers, AdamW and gradient
//! checking. All arithmetic is `f64`.

pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod tensor;

pub use layers::{Dense, Layer, Mode, Norm, NormKind, Param, Sequential, Tape};
pub use optim::{AdamW, CosineSchedule, ParamGroup};
pub use tensor::Tensor2D;
