//! Click-through-rate estimation with a shared embedding trained jointly by
//! a prediction subnet, a user/ad matching subnet and an ad/ad correlation
//! subnet, plus LR, FM and DNN baselines.

pub mod cli;
pub mod config;
pub mod features;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod training;
