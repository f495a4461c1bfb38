//! Bias-free dense networks with exact reverse-mode gradients.

mod activation;
mod loss;
mod network;

pub use activation::Activation;
pub use loss::{argmax, softmax, Loss};
pub use network::{Architecture, Layer, Network, Trace};
