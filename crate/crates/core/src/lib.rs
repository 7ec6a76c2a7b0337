//! Unpaired content/style glyph generation: a tape autodiff core, the
//! encoder/generator/discriminator networks, a procedural glyph corpus,
//! training, and SSIM/PSNR evaluation.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the bottom of this file fix the common choices.

pub mod error;
pub mod glyph;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use rng::Rng;
pub use scalar::Scalar;
pub use tensor::{ParamId, ParamStore, Tape, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
/// Training precision.
pub type Model32 = model::Model<f32>;
/// Gradient-check precision.
pub type Model64 = model::Model<f64>;
pub type TrainState32 = trainer::TrainState<f32>;
