pub mod error;
pub mod inference;
pub mod likelihood;
pub mod model;
pub mod odesolve;
pub mod optimize;
pub mod sensitivity;
pub mod simulate;
pub mod splines;

pub use error::{Error, Result};
