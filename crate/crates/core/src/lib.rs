//! Laboratory for decoupled token-level rewards and curriculum batch
//! scheduling on an exactly computable tabular softmax policy.

pub mod advantage;
pub mod config;
pub mod env;
pub mod error;
pub mod metrics;
pub mod nrp;
pub mod par;
pub mod policy;
pub mod probe;
pub mod rewards;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
