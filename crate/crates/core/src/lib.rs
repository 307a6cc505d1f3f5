pub mod cli;
pub mod dataset;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod morphology;
pub mod nets;
pub mod nn;
pub mod phantom;
pub mod postprocess;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;
