//! Boundary-integral simulation of periodic water waves with a free surface,
//! in the physical strip and in the conformally mapped closed-contour plane.

pub mod amplitude;
pub mod birkhoff_rott;
pub mod cli;
pub mod conformal;
pub mod curve;
pub mod diagnostics;
pub mod error;
pub mod evolution;
pub mod numerics;
pub mod spectral;

pub use error::{Error, Result};
