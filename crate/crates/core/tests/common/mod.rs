//! Helpers shared by the integration-test targets and the acceptance harness.
#![allow(dead_code)]

pub mod fixtures;
pub mod gradcheck;
pub mod oracles;
pub mod props;
