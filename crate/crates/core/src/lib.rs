pub mod deep_gp;
pub mod diffnum;
pub mod error;
pub mod exact_gp;
pub mod harness;
pub mod lti_gp;
pub mod metrics;
pub mod optim;
pub mod simulator;
pub mod static_gp;

pub use error::{Error, Result};
