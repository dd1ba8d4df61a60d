//! Synthesis, simulation and verification of choice-based cooperative control
//! for linear multi-agent systems.
//!
//! Each agent fixes a private choice at the initial time and applies a
//! pre-agreed control indexed by that choice. The crate decides which target
//! tensors are realizable without communication, computes the optimal
//! open-loop, feedback, hybrid and penalized control laws, simulates them
//! under noise, and checks every solution against independent oracles.

pub mod approach;
pub mod cli;
pub mod error;
pub mod feedback;
pub mod model;
pub mod numerics;
pub mod openloop;
pub mod oracle;
pub mod scenarios;
pub mod sim;

pub use error::{Error, Result};
pub use model::{LinearSystem, Scenario, TargetTensor};
pub use numerics::{Matrix, Vector};
