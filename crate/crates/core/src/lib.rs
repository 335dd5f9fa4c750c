pub mod error;
pub mod geom;
pub mod nd;

pub use error::{Error, Result};
pub mod assignment;
pub mod compare;
pub mod kalman;
pub mod layers;
pub mod metrics;
pub mod mot;
pub mod predictor;
pub mod scenario;
pub mod synth;
pub mod tcn;
pub mod tracker;
pub mod training;
pub mod transformer;
