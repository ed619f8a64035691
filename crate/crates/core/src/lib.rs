extern crate openblas_src;

pub mod conic;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod linear_onestep;
pub mod linear_twostep;
pub mod nonlinear_onestep;

pub use error::LearnError;
