//! Contract-based controller synthesis for uncertain stochastic systems.
//!
//! The toolkit relates a concrete agent–environment system to a
//! low-dimensional nominal surrogate through (ε, δ) sub-simulation
//! certificates, abstracts the surrogate to a finite MDP, runs robust value
//! iteration against a co-safe LTL objective, and validates the certified
//! bound by Monte Carlo simulation of the concrete closed loop.

pub mod abstraction;
pub mod compensators;
pub mod error;
pub mod interval;
pub mod gmdp;
pub mod harness;
pub mod measures;
pub mod relations;
pub mod synthesis;

pub use error::{Error, Result};
