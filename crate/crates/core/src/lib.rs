//! LiDAR-only odometry built on a dual-iteration extended Kalman filter.
//!
//! Each frame is propagated with a constant-velocity model, then refined by
//! two nested loops: the outer loop re-deskews the scan with the latest
//! end-of-frame estimate, the inner loop re-matches points to planes in the
//! map and applies an iterated Kalman update. The velocity process noise is
//! adapted once per frame from the size of the prior correction.
//!
//! The crate also ships a deterministic ray-casting LiDAR simulator and a
//! trajectory-evaluation toolkit used by the acceptance suite.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod filter;
pub mod eval;
pub mod manifold;
pub mod map;
pub mod observation;
pub mod odometry;
pub mod pointcloud;
pub mod sim;
pub mod state;
pub mod undistort;

pub use error::{Error, Result};
