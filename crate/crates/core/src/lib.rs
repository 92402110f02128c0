//! Capsule networks trained on the CPU.
//!
//! The crate is layered bottom-up: [`tensor`] provides dense arrays and a
//! reverse-mode tape, [`capsule`] and [`loss`] build the capsule-specific
//! pieces on top of it, and [`model`], [`train`], [`checkpoint`] and
//! [`ensemble`] assemble them into trainable, persistable networks.

pub mod capsule;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod ensemble;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod tensor;
pub mod train;
