//! Controllable, simultaneous synthesis of CT-like images and their
//! segmentation masks.

pub mod ensemble;
pub mod config;
pub mod error;
pub mod format;
pub mod gan;
pub mod guidance;
pub mod maskgen;
pub mod numerics;
pub mod phantom;
pub mod pipeline;
pub mod registry;
pub mod seed;
pub mod volumes;

pub use error::{Error, Result};
