//! IO companion to `cgseg-core`: the CGT1 tensor file, dataset directories,
//! model checkpoints, CSV reports, PPM rendering, experiment configuration,
//! and the command implementations behind the `cgseg` binary.

pub mod cgt;
pub mod checkpoint;
pub mod commands;
pub mod dataset_io;
pub mod error;
pub mod expconfig;
pub mod pipeline;
pub mod ppm;
pub mod report;

pub use error::{CliError, Result};
