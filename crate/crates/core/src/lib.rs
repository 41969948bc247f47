pub mod adapters;
pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod decode;
pub mod error;
pub mod io;
pub mod leafpipe;
pub mod model;
pub mod params;
pub mod seqcore;
pub mod train;

pub use error::{Error, Result};
