//! Balanced domain-class alignment for multi-domain long-tailed learning.

pub mod datagen;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod io;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod stats;
pub mod trainer;

pub use error::{Error, Result};
