pub mod basis;
pub mod calibration;
pub mod data;
pub mod dgp;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod modular;
pub mod nuisance;
pub mod numeric;
pub mod pipeline;
pub mod posterior;
pub mod pseudo;
pub mod rng;
pub mod tail;

pub use error::{Error, Result};
