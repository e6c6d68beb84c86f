//! Camera relocalization from dense scene-coordinate predictions.
//!
//! The pipeline: per-pixel world coordinates (from depth and pose, or from a
//! prediction source) are sampled on a grid, turned into 2D-3D
//! correspondences and handed to a RANSAC PnP solver. Poses are
//! camera-to-world, lengths are millimeters.

pub mod augmentation;
pub mod cli;
pub mod dataset_io;
pub mod evaluation;
pub mod geometry;
pub mod par;
pub mod pose_solver;
pub mod predictor;
pub mod rng;
pub mod scene_map;
pub mod synthetic;
