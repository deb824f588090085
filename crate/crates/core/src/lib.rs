pub mod autodiff;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod fileio;
pub mod flow;
pub mod metrics;
pub mod monitor;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod rcpqnet;
pub mod scene_sim;
pub mod trainer;
pub mod task_codec;
pub mod util;

pub use error::{Error, Result};
