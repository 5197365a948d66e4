//! Small dense neural-network kernel: matrices, layers, losses, Adam,
//! finite-difference gradient checks and checkpoints. All arithmetic is
//! `f64`.

pub mod checkpoint;
pub mod gradcheck;
pub mod loss;
pub mod matrix;
pub mod ops;
pub mod param;

pub use checkpoint::Checkpoint;
pub use matrix::DenseMatrix;
pub use param::{adam_step, Parameter, TrainHyper};
