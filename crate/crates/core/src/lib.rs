//! Scale-wise autoregressive image generation over a multi-scale VQ token
//! pyramid, with flexible step schedules.

pub mod data;
pub mod error;
pub mod eval;
pub mod inference;
pub mod io;
pub mod layers;
pub mod model;
pub mod pyramid;
pub mod quant;
pub mod scheduler;
pub mod tasks;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
