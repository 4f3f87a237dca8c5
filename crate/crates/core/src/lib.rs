#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapt;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod memory;
pub mod model;
pub mod numerics;
pub mod refine;
pub mod report;
pub mod rng;

pub use config::RunConfig;
pub use error::{Error, Result};
