//! Sample-size formulas, trial simulation and weighted-and-replicated GEE
//! analysis for prototypical two-stage SMARTs with binary outcomes.

pub mod design;
pub mod error;
pub mod experiments;
pub mod formulas;
pub mod gee;
pub mod matkit;
pub mod normal;
pub mod planning;
pub mod rng;
pub mod scenario_file;
pub mod schema;
pub mod simulator;

pub use error::{Error, Result};
