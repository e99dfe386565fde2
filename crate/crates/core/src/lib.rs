pub mod attribution;
pub mod baselines;
pub mod catalog;
pub mod estimation;
pub mod experiment;
pub mod kernels;
mod linalg;
pub mod metrics;
pub mod report;
mod rng;
pub mod simulate;
pub mod stats;
