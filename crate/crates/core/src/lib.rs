//! Simulation of personalized quantum federated learning: a statevector
//! simulator, variational classifiers with shared and private layers,
//! GHZ-based secure aggregation, and the federated training loop.

pub mod circuits;
pub mod data;
pub mod orchestrator;
pub mod protocol;
pub mod qsim;
pub mod seed;
pub mod training;
