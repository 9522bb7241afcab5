pub mod accountant;
pub mod dp_engine;
pub mod error;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod pipeline;

pub use error::{Error, Result};
