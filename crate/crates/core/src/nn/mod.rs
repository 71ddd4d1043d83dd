//! Minimal dense-tensor engine with reverse-mode gradients for the closed
//! layer set used by the denoiser and encoder: linear, layer norm, SiLU,
//! LeakyReLU, and row softmax. 64-bit floats throughout.

pub mod checkpoint;
pub mod embed;
pub mod layers;
pub mod optim;
pub mod tensor;

pub use embed::{sinusoidal_embedding, TimeEmbedding};
pub use layers::{LayerNorm, Linear};
pub use optim::{AdamW, AdamWConfig};
pub use tensor::Tensor2D;
