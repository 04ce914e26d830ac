//! Object classification from sets of tactile pressure frames.
//!
//! The pipeline: a residual CNN turns each 32x32 single-channel pressure
//! frame into a feature vector; frames are arranged as nodes of a view graph
//! whose edge weights are produced by a learned relation MLP over viewpoint
//! geometry; graph convolution, all-pairs message passing and selective
//! coarsening build a multi-level shape descriptor that feeds a linear
//! classifier. Everything runs on a small reverse-mode autodiff tape in
//! either f32 (training) or f64 (gradient checking).

pub mod backbone;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod gcn;
pub mod gradcheck;
pub mod harness;
pub mod model;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod viewgraph;

pub use error::{Error, Result};
pub use rng::Rng;
pub use scalar::Scalar;
pub use tape::{Mode, OpKind, Tape, Var};
pub use tensor::Tensor;
