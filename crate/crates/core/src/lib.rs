pub mod attention;
pub mod checkpoint;
pub mod error;
pub mod experiment;
pub mod layers;
pub mod model;
pub mod parallel;
pub mod patcher;
pub mod series;
pub mod train;
pub mod vtnorm;

pub use error::{Error, Result};
pub use model::{AblationFlags, FlexTsf, ModelConfig, SamplingMode};
