//! Memory planning for diffusion-LLM inference.

pub mod allocsim;
pub mod chunker;
pub mod cli;
pub mod component;
pub mod emit;
pub mod error;
pub mod graph;
pub mod kernel;
pub mod liveness;
pub mod planner;
pub mod random;
pub mod selftest;
pub mod vmm;
pub mod workload;

pub use component::Component;
pub use error::{Error, Result};
