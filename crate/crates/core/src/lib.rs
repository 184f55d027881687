//! Partial self-attention blocks for detection networks, with the detection
//! metrics, toy detector, data tooling and benchmarking needed to exercise
//! them at desk scale.

pub mod bench;
pub mod blocks;
pub mod data;
pub mod eval;
pub mod tensor;
pub mod toynet;
