//! Moment-based image encoders, pixel-conditioned radiance fields and a
//! differentiable volume renderer, sized for a single CPU core.

pub mod autodiff;
pub mod camera;
pub mod encoder;
pub mod error;
pub mod field;
pub mod gabor;
pub mod gradcheck;
pub mod image;
pub mod metrics;
pub mod model;
pub mod params;
pub mod renderer;
pub mod scene;
pub mod tensor;
pub mod train;
pub mod zernike;

pub use error::{Error, Result};
