//! Pathwise McKean-Vlasov solvers, empirical optimal transport and
//! fluctuation diagnostics on uniform time grids.

pub mod drift;
pub mod error;
pub mod fluctuations;
pub mod io;
pub mod noise;
pub mod paths;
pub mod reflection;
pub mod solver;
pub mod transport;

pub use error::{Error, Result};
