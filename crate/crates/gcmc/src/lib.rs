//! Graph convolutional matrix completion.
//!
//! Predicts missing entries of a user-item rating matrix by treating ratings
//! as labeled edges of a bipartite graph. A graph convolutional encoder
//! passes messages per rating level to produce user and item embeddings; a
//! bilinear softmax decoder turns embedding pairs into distributions over
//! rating levels, whose expectation is the predicted rating. Training
//! minimizes the summed negative log-likelihood over observed edges with
//! hand-derived reverse-mode gradients, Adam, and an exponential moving
//! average of the parameters for evaluation.
//!
//! The crate is self-contained: dense/sparse kernels, the RNG, the
//! optimizer, and backprop are all implemented here, which keeps every
//! random stream and reduction order reproducible bit-for-bit.

pub mod checkpoint;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
