pub mod bench;
mod codec;
pub mod cohort;
pub mod control_plane;
pub mod data_plane;
pub mod engine;
pub mod error;
pub mod marshal;
pub mod model;
mod net;
pub mod wire;
pub mod workload;

pub use error::{Error, Result};
