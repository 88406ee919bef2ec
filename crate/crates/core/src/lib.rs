//! Observation-driven models in random environments: simulation, exact
//! couplings, backward iteration to the stationary regime, and verification of
//! the contraction, drift and total-variation conditions that guarantee it.

pub mod benchmarks;
pub mod covariates;
pub mod drift;
pub mod engine;
pub mod io;
pub mod kernels;
pub mod links;
pub mod model;
pub mod numeric;
pub mod rng;
pub mod verify;
