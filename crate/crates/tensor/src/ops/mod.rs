mod conv;
mod elementwise;
mod linalg;
mod nn;
mod shape;

pub use conv::Conv3dGeometry;
pub use elementwise::{sigmoid, softplus};
pub use nn::LAYERNORM_EPS;
