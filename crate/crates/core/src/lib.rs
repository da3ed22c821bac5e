//! One-shot affordance detection at desk scale.
//!
//! Given a single support image annotated with human and object boxes, the
//! model estimates the action purpose, transfers it into a set of query
//! images, enhances the shared structure across the query set with an
//! alternating soft-clustering step, and decodes per-pixel affordance masks
//! through a top-down pyramid decoder with deep supervision.
//!
//! The crate is self-contained: a minimal dense tensor type with reverse-mode
//! automatic differentiation, a toy convolutional encoder, the purpose
//! learning / purpose transfer / collaboration enhancement modules, the
//! decoder and loss, evaluation metrics (IoU, MAE, E-measure, CC), a
//! deterministic synthetic episode generator plus a directory loader, and an
//! episodic trainer with Adam and binary checkpoints.
//!
//! Data-parallel inner loops (convolution channels, matrix rows, per-episode
//! evaluation) run on rayon when the default `parallel` feature is enabled and
//! fall back to plain sequential loops without it. Both paths produce bitwise
//! identical results: parallel work is always split over independent output
//! slices and every float is reduced in a fixed sequential order.

pub mod collab;
pub mod decoder;
pub mod encoder;
pub mod episodes;
pub mod error;
pub mod metrics;
pub mod model;
pub mod purpose;
pub mod tensor;
pub mod train;
pub mod transfer;

pub use error::{DataError, Error, Result, TensorError};
pub use tensor::{Scalar, Tape, Tensor, Var};
