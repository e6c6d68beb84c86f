//! Camera pose from 2D-3D correspondences: minimal four-point solver, inlier
//! scoring, Levenberg-Marquardt refinement and the RANSAC driver.

mod minimal;
mod p3p;
mod ransac;
mod refine;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use minimal::{solve_pnp_minimal, COINCIDENT_TOLERANCE_MM, COLLINEAR_TOLERANCE, POLISH_STEPS};
pub use ransac::{
    generate_hypotheses, ransac_localize, score_hypothesis, select_best, Diagnostics, Hypothesis,
    LocalizationResult, Score, StopReason,
};
pub use refine::{
    refine_pose, refine_pose_report, LmStop, RefineReport, LM_GRADIENT_TOLERANCE, LM_MAX_ITERATIONS,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolverError {
    #[error("degenerate configuration (collinear or coincident scene points)")]
    Degenerate,
    #[error("no P3P candidate places all points in front of the camera")]
    NoValidCandidate,
    #[error("need at least 4 correspondences, got {got}")]
    UnderDetermined { got: usize },
    #[error("need at least 4 correspondences, got {got}")]
    TooFewCorrespondences { got: usize },
    #[error("no pose: {empty_slots} hypothesis slots empty after {sampling_attempts} attempts")]
    NoPose {
        sampling_attempts: usize,
        empty_slots: usize,
    },
    #[error("invalid RANSAC config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RansacConfig {
    /// Expected correspondence count (a 40x40 grid by default).
    pub n_correspondences: usize,
    pub n_hypotheses: usize,
    pub inlier_threshold_px: f64,
    pub refine_steps: usize,
    pub refine_inlier_cap: usize,
    pub refine_min_inliers: usize,
    pub max_sampling_attempts_per_hypothesis: usize,
    pub rng_seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            n_correspondences: 1600,
            n_hypotheses: 256,
            inlier_threshold_px: 10.0,
            refine_steps: 8,
            refine_inlier_cap: 100,
            refine_min_inliers: 50,
            max_sampling_attempts_per_hypothesis: 10_000,
            rng_seed: 0,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<(), SolverError> {
        let bad = |m: &str| Err(SolverError::InvalidConfig(m.to_string()));
        if self.n_hypotheses < 1 {
            return bad("need at least one hypothesis");
        }
        if !(self.inlier_threshold_px > 0.0) {
            return bad("inlier threshold must be positive");
        }
        if self.refine_inlier_cap < 4 || self.refine_min_inliers < 4 {
            return bad("refinement inlier cap and minimum must be at least 4");
        }
        if self.max_sampling_attempts_per_hypothesis < 1 {
            return bad("need at least one sampling attempt per hypothesis");
        }
        Ok(())
    }
}
