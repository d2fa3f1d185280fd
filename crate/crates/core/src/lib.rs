pub mod alignment;
pub mod augment;
pub mod bev;
pub mod container;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod motion;
pub mod numeric;
pub mod pipeline;
pub mod sim;

pub use error::{Error, Result};
