//! Hyper-parameter tuning for adversarial training: tabular evaluation data,
//! a toy training engine, surrogate models, optimizers and replay harness.

pub mod analysis;
pub mod attacks;
pub mod domain;
pub mod harness;
pub mod optimizers;
pub mod plot;
pub mod surrogate;
pub mod toytrain;
