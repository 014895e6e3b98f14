//! Binary spiking causal language model with softmax-free spiking
//! attention, spike-aware distillation from a dense teacher, surrogate
//! gradient BPTT training and an analytic energy profiler.

pub mod attention;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod distill;
pub mod energy;
pub mod error;
pub mod graph;
pub mod model;
pub mod neurons;
pub mod numerics;
pub mod selftest;
pub mod training;

pub use error::{Error, Result};
