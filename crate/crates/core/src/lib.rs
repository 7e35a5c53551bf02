pub mod audiofront;
pub mod config;
pub mod corpus;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod io;
pub mod matrix;
pub mod model;
pub mod objective;
pub mod ops;
pub mod params;
pub mod retrieval;
pub mod synth;
pub mod trainer;
pub mod xattn;

pub use error::{Error, Result};
pub use matrix::Matrix;
