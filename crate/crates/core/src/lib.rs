pub mod cli;
pub mod dgp;
pub mod error;
pub mod inference;
pub mod io;
pub mod linalg;
pub mod panel;
pub mod parallel;
pub mod rank;
pub mod sim;
pub mod solver;
pub mod tls;
pub mod treatment;

pub use error::{Error, Result};
