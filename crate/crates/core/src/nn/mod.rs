//! Layers, parameter storage and the optimizer.

mod layers;
mod params;
mod sgd;

pub use layers::{BatchNormLayer, ConvLayer, FcLayer, PoolLayer};
pub use params::{init_rng, BoundParams, Gradients, ParamStore};
pub use sgd::{sgd_step, SgdConfig, SgdState};
