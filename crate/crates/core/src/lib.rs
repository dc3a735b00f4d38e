//! Time-gated spatio-temporal attention for video token grids, with the
//! tensor engine, synthetic tasks, training harness and gate visualization
//! around it.

pub mod checkpoint;
pub mod error;
pub mod gateviz;
pub mod harness;
pub mod numerics;
pub mod params;
pub mod pipeline;
pub mod synth;
pub mod tg_block;

pub use error::{Error, Result};
pub use numerics::{RngState, Tensor};
