//! Differentiable multi-sensor (LiDAR + camera) object insertion, a small
//! BEV fusion detector, universal adversarial mesh attacks against it, and
//! the defenses and metrics used to evaluate them.

pub mod attack;
pub mod autodiff;
pub mod camera;
pub mod defense;
pub mod detector;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod harness;
pub mod jet;
pub mod lidar;
pub mod optim;
pub mod par;
pub mod rooftop;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
