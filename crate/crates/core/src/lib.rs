pub mod aggregation;
pub mod cli;
pub mod client;
pub mod dataset;
pub mod evaluation;
pub mod model;
pub mod orchestrator;
pub mod protocol;
pub mod registry;
pub mod seed;
pub mod sim;
