pub mod agents;
pub mod autodiff;
pub mod datasets;
pub mod diffrank;
pub mod game;
pub mod harness;
pub mod message;
pub mod metrics;
pub mod nn;
