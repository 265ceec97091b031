//! Desk-scale laboratory for studying the batch-level adversarial risks of
//! test-time adaptation (TTA).
//!
//! The crate implements six TTA update rules over batch-norm networks, the
//! distribution-invading attack that perturbs a malicious subset of a test
//! batch, robust BN-estimation defenses, BN-drift forensics, and a seeded
//! experiment harness that ties them together behind a CLI.

pub mod attack;
pub mod bench;
pub mod cli;
pub mod config;
pub mod defense;
pub mod diagnostics;
pub mod error;
pub mod nn;
pub mod numeric;
pub mod tta;

pub use error::{Error, Result};
