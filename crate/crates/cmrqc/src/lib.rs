//! Batch pipeline, validation reports and review service for cine cardiac MR
//! segmentations, built on `cmrqc-core`.

pub mod config;
pub mod layout;
pub mod output;
pub mod pipeline;
pub mod queue;
pub mod review;
pub mod server;
pub mod slices;
pub mod synth;
pub mod validation;
