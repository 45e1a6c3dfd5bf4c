//! Slow/fast parameter-efficient continual learning at desk scale.

pub mod aggregate;
pub mod backbone;
pub mod error;
pub mod harness;
pub mod head;
pub mod learners;
pub mod numeric;
pub mod optim;
pub mod pet;
pub mod suite;

pub use error::{Error, Result};
