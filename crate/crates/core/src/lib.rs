#![no_std]
#![doc = include_str!("../README.md")]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod composer;
pub mod control;
pub mod critic;
pub mod demo;
pub mod error;
pub mod guidance;
pub mod library;
pub mod linalg;
pub mod mapper;
pub mod metrics;
pub mod objectives;
pub mod planner;

pub use control::{Channel, ChannelKind, ControlSequence, ControlState, HeadLimits};
pub use error::{Error, Result};
pub use nalgebra;
