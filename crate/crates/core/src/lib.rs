//! Few-shot text classification by prompting a small causal LM, in direct
//! and noisy-channel form, with demonstration and parameter-restricted
//! tuning methods and an evaluation harness.

pub mod checkpoint;
pub mod datagen;
pub mod error;
pub mod harness;
pub mod lm;
pub mod optim;
pub mod scoring;
pub mod tuning;
pub mod verify;

pub use error::{Error, Result};
