pub mod atlas;
pub mod biomarker;
pub mod cohort;
pub mod config;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod fcn;
pub mod instruct;
pub mod params;
pub mod pipeline;
pub mod seed;
pub mod steps;
pub mod toylm;
pub mod training;

pub use atlas::AtlasPartition;
pub use error::{Error, Result};
