//! Hybrid depthwise-convolution / global self-attention image classifier.
//!
//! Everything is computed in `f64` on the CPU: a small tensor type with a
//! recorded graph for reverse-mode gradients, the convolution and attention
//! layers, the staged model, a seeded data pipeline, classification metrics,
//! Grad-CAM explanations, and a deterministic training loop.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcam;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod plot;
pub mod synthetic;
pub mod taxonomy;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use tensor::{Activation, ElementwiseOp, Tensor};
pub use model::{build_model, load_checkpoint, save_checkpoint, Model, ModelConfig};
