pub mod baselines;
pub mod cif;
pub mod diffmath;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod matrix;
pub mod metrics;
pub mod seeds;
pub mod synthdata;
pub mod toyllm;
pub mod training;

pub use error::{Error, Result};
pub use matrix::Matrix;
