//! Synthetic planted-token experiments for learnable attention masks:
//! data generation, training, ablation grids, and attention diagnostics.

pub mod ablation;
pub mod artifacts;
pub mod config;
pub mod gradcheck;
pub mod stats;
pub mod task;
pub mod train;
