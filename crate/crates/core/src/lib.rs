//! Conformal prediction under distribution shift: split CP, entropy-scaled
//! sets, test-time adaptation, an online ACI baseline, a synthetic shift
//! simulator and evaluation metrics.

pub mod config;
pub mod conformal;
pub mod entropy_scaling;
pub mod error;
pub mod experiment;
pub mod io;
pub mod metrics;
pub mod model;
pub mod numkit;
pub mod online_baseline;
pub mod shiftsim;
pub mod tta;

pub use error::{Error, Result};
