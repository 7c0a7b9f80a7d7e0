pub mod autodiff;
pub mod cli;
pub mod corpus;
pub mod decode;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod generator;
pub mod index;
pub mod model;
mod nn;
pub mod rag;
pub mod retriever;
pub mod synthetic;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
