//! Self-supervised LiDAR point cloud forecasting.
//!
//! The pipeline projects scan sequences into spatio-temporal range-image
//! tensors, trains a 3D-convolutional encoder-decoder to predict future range
//! images plus validity masks, re-projects the predictions to 3D point
//! clouds, and evaluates them against geometric baselines with
//! Chamfer-distance statistics.

pub mod autodiff;
pub mod baselines;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod geom;
pub mod lidar_io;
pub mod projection;
pub mod selfcheck;
pub mod trainer;

pub mod losses;
pub mod network;
pub mod nn_index;

pub use error::{Error, Result};
