//! Mesh-free learned rigid-body simulation.

pub mod anchors;
pub mod cli;
pub mod datagen;
pub mod encoder;
pub mod eval;
pub mod geometry;
pub mod interaction;
pub mod model;
pub mod nn;
pub mod profile;
pub mod scene;
pub mod selftest;
pub mod tensor;
pub mod training;
