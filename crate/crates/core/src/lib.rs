//! Off-road drivable-area extraction from LiDAR height maps.
//!
//! Two binary fully convolutional branches learn a drivable-vs-rest and an
//! obstacle-vs-rest surface; their probabilities are fused into a
//! traversability score and a four-way label map in which ambiguous terrain
//! ends up grey. Training can use human labels, automatically generated weak
//! labels (vehicle path plus region-grown obstacles), or a mix of both.

pub mod autolabel;
pub mod bev;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod grids;
pub mod metrics;
pub mod model;
pub mod nnet;
pub mod pnm;
pub mod rng;
pub mod synthworld;
pub mod trainer;

pub use error::{Error, Result};
