pub mod autodiff;
pub mod baseline;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod fieldgen;
pub mod getnet;
pub mod image;
pub mod io;
pub mod neednet;
pub mod spectrum;
pub mod train;

pub use error::{Error, Result};
