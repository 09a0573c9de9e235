//! Desk-scale laboratory for backdoor poisoning attacks on a tiny text
//! classifier and a low-rank-adapter defense with gradient alignment,
//! instrumented with a Gaussian-filter frequency probe.

pub mod align;
pub mod error;
pub mod lora;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod poison;
pub mod probe;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
