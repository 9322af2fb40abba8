//! Relightable volumetric transfer fields.
//!
//! A scene is represented by a density field and a non-negative, light- and
//! view-conditioned transfer gradient. Pixels are rendered by volume
//! integration of the transfer gradient along camera rays; environment-map
//! relighting accumulates one-light-at-a-time predictions over median-cut
//! lights.

pub mod autodiff;
pub mod camera;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod field;
pub mod image;
pub mod lighting;
pub mod math;
pub mod optim;
pub mod oracle;
pub mod render;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use field::{Architecture, FieldParams, FieldQuery, Level};
pub use math::{Mat3, Vec3};
pub use tensor::{Real, Tensor};
