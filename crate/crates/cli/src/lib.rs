//! Optimization demos: homography registration, multi-view depth, a
//! targeted attack on feature matching, and operator benchmarks.

pub mod app;
pub mod attack;
pub mod bench;
pub mod config;
pub mod depth;
pub mod optim;
pub mod register;
pub mod synth;
