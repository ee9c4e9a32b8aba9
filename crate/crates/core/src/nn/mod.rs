//! Minimal neural-network toolkit: kernels, an autodiff tape, parameters and layers.

pub mod graph;
pub mod kernels;
pub mod layers;
pub mod params;

pub use graph::{BnUpdate, Gradients, Graph, Mode, Var};
pub use kernels::{ConvGeom, RoiRef};
pub use layers::{BatchNorm2d, Conv2d, ConvBn, ConvTranspose2d, Linear};
pub use params::{Param, ParamId, ParamKind, ParamStore, Scope};
