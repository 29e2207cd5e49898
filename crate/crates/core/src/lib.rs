//! Point-cloud reconstruction with a masked-autoencoder encoder and a
//! conditional diffusion decoder.
//!
//! The encoder turns the visible patches of a cloud into latent tokens; the
//! decoder denoises the masked patches conditioned on those tokens. Around
//! that sit the geometry kernels, a small autodiff engine, training loops,
//! evaluation metrics and the completion/upsampling/compression drivers.

pub mod checkpoint;
pub mod config;
pub mod data_io;
pub mod diffusion;
pub mod error;
pub mod geometry;
pub mod graph;
pub mod kdtree;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod tasks;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use geometry::{MaskSpec, MaskStrategy, PatchSet, Point, PointCloud};
pub use graph::{grad_check, Gradients, Graph, Var};
pub use tensor::{Precision, Real, Tensor};
