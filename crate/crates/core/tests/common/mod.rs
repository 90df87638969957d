//! Helpers shared by the integration test targets.
#![allow(dead_code)]

pub mod experiments;
pub mod golden;
pub mod gradients;
pub mod masking;
