//! A privacy-preserving federated learning data fabric.

pub mod phe;
pub mod nn;
pub mod metrics;
pub mod ingest;
pub mod fed;
pub mod fabric;
pub mod experiment;
