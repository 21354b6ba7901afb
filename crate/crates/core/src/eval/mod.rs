pub mod dataset;
pub mod harness;
pub mod metrics;
