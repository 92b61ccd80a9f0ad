pub mod bayes;
pub mod bench;
pub mod cli;
pub mod confidence;
pub mod dynamics;
pub mod error;
pub mod linalg;
pub mod mpc;
pub mod nlp;
pub mod orchestrator;
pub mod sweep;
