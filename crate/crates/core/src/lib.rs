//! Multimodal (wrist IMU + 2D skeleton) action recognition for upper-limb
//! activities of daily living.
//!
//! The crate covers the whole pipeline: on-disk formats and dataset splits
//! ([`data`]), IMU image windows ([`imu_pipeline`]), keypoint heatmap volumes
//! ([`skeleton_pipeline`]), the two-branch transformer ensemble ([`models`]),
//! the pretrain-then-fuse training protocol ([`training`]), per-participant
//! F1 analysis ([`evaluation`]), multivariate DTW similarity ([`dtw`]) and a
//! synthetic corpus generator ([`synthgen`]).

pub mod data;
pub mod dtw;
mod error;
pub mod evaluation;
pub mod imu_pipeline;
pub mod models;
pub mod seeds;
pub mod skeleton_pipeline;
pub mod synthgen;
pub mod training;

pub use error::{CoreError, Result};
pub use rehab_tensor as tensor;
pub use rehab_tensor::Real;
