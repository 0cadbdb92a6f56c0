pub mod arch;
pub mod autodiff;
pub mod data;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod model;
pub mod params;
pub mod real;
pub mod saliency;
pub mod selection;
pub mod structures;
pub mod train;
pub mod zoo;

pub use error::{Error, Result};
