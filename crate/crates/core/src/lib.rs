//! Semi-supervised image classification with class-balanced supervision,
//! weak/strong consistency gated by per-class dynamic thresholds, selective
//! negative learning on rejected samples and an attention-bank feature
//! enhancer.

pub mod attention;
pub mod audit;
pub mod augment;
pub mod config;
pub mod datamodel;
pub mod dta;
pub mod error;
pub mod gate;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod sampler;
pub mod snl;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
