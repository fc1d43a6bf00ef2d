//! Attention-pattern routing for a toy video diffusion transformer.
//!
//! Heads are scored by how far their full attention distribution is from
//! its frame-local and window-local restrictions, and the least sensitive
//! ones are switched to the cheaper pattern. Everything here is `no_std`
//! (with `alloc`); IO and the command line live in the `headroute` crate.

#![no_std]
extern crate alloc;

pub mod attention;
pub mod cost;
pub mod degrade;
pub mod error;
pub mod grid;
pub mod losses;
pub mod model;
pub mod rng;
pub mod routing;
pub mod schedule;
pub mod tape;
pub mod train;

pub use attention::{Pattern, WindowSpec};
pub use error::{Error, Result};
pub use grid::{Grid3, LatentGrid, VideoClip};
pub use model::{DiffusionTransformer, ModelConfig, Parameterization};
pub use routing::{AssignmentMap, HeadAssignment};
pub use schedule::NoiseSchedule;
