//! Differentiable channel pruning via latent-vector hypernetworks.
//!
//! Per-layer latent vectors feed a three-stage hypernetwork that generates
//! the weight tensors of a convolutional backbone. An l1 (or l2) proximal
//! step sparsifies the latents during a search phase; thresholded masks
//! then prune the generated weights to a target FLOPs ratio, the
//! hypernetworks are dropped, and the explicit pruned network is
//! fine-tuned.

pub mod autodiff;
pub mod backbones;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod hypernet;
pub mod proxopt;
pub mod pruner;
pub mod sharegraph;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{DhpError, Result};
pub use tensor::Tensor;
