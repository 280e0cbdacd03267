pub mod alignment;
pub mod bt;
pub mod config;
pub mod corpus;
pub mod decode;
pub mod embeddings;
pub mod error;
pub mod init;
pub mod io;
pub mod pipeline;
pub mod nn;
pub mod rouge;
pub mod seq2seq;
pub mod train;

pub use error::{Error, Result};
