//! Palmprint registration and minutia matching.

pub mod cnn;
pub mod config;
pub mod extraction;
pub mod geometry;
pub mod ght;
pub mod global;
pub mod image;
pub mod mcc;
pub mod orientation;
pub mod pipeline;
pub mod synth;
pub mod template;
