//! Slotwise world models with reusable mechanisms: environments, a small
//! autodiff engine, the model, two-phase training and H@1 evaluation.

pub mod config;
pub mod envs;
pub mod error;
pub mod eval;
pub mod io;
pub mod model;
pub mod netops;
pub mod scalar;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type WorldModel32 = model::WorldModel<f32>;
pub type WorldModel64 = model::WorldModel<f64>;
pub type Decoder32 = model::Decoder<f32>;
pub type Decoder64 = model::Decoder<f64>;
