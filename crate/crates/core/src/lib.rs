//! Dynamic-treatment-regime estimation on longitudinal panels.

pub mod dkl;
pub mod estimators;
pub mod harness;
pub mod error;
pub mod panel;
pub mod regress;
pub mod seeds;
pub mod sem_sim;
pub mod weights;

pub use error::{Error, Result};
