pub mod analysis;
pub mod attention;
pub mod autodiff;
pub mod bleu;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoding;
pub mod error;
pub mod gradcheck;
pub mod hypersearch;
pub mod losses;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod training;

pub use autodiff::{Mask, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
