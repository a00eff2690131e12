//! Non-rigid alignment of geometrically inconsistent multi-view depth into a
//! single canonical point cloud.

pub mod cloud;
pub mod config;
pub mod error;
pub mod export;
pub mod field;
pub mod global;
pub mod icp;
pub mod ingest;
pub mod inverse;
pub mod lie;
pub mod optim;
pub mod pipeline;
pub mod ply;
pub mod spatial;
pub mod stats;
pub mod synth;

pub use cloud::PointCloud;
pub use error::{Error, Result};
