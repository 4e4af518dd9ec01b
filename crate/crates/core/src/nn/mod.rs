//! Minimal hand-differentiated neural-network layers.

pub mod conv;
pub mod layers;
pub mod params;
pub mod real;

pub use conv::{Conv2d, ConvGeom, ConvTranspose2d};
pub use layers::{gelu, gelu_backward, Attention, Block, LayerNorm, Linear, Transformer};
pub use params::{Init, ParamId, ParamStore};
pub use real::{matmul, Real};
