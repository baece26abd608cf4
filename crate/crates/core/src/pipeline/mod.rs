//! Dataset generation and the staged reconstruction pipeline.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod run;
pub mod stage1;
pub mod synth;
