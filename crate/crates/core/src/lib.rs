//! Simulation and verification toolkit for balanced generalized Pólya urns whose
//! initial composition grows with the number of draws.

pub mod cli;
pub mod config;
pub mod limits;
pub mod linalg;
pub mod quad;
pub mod report;
pub mod rng;
pub mod sim;
pub mod spectral;
pub mod suites;
pub mod urn;
pub mod verify;
