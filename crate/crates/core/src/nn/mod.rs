//! A small convolutional network with exact analytic gradients.
//!
//! The default model maps a one-hot encoded mask through stride-2 conv/ReLU
//! blocks, global average pooling and a dense layer to the representation
//! `r`, then through a dense-ReLU-dense projection head to `z`. Everything
//! runs in `f64` so finite-difference checks have headroom.

mod layer;
mod model;
mod tensor;

pub use layer::{LayerDescriptor, Shape};
pub use model::{ArchitectureConfig, BatchTrace, EmbeddingModel, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use tensor::{l2_normalize, l2_normalize_backward, one_hot_encode, Tensor};
