use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::geometry::{reprojection_error_cam, Intrinsics, Pose};
use crate::par;
use crate::predictor::{Correspondence, CorrespondenceSet};
use crate::rng;

use super::minimal::solve_minimal_cam;
use super::refine::{refine_pose, CamFromWorld};
use super::{RansacConfig, SolverError};

/// Inlier count of a hypothesis and the indices that make it up.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Score {
    pub count: usize,
    pub inliers: Vec<usize>,
}

fn is_inlier(k: &Intrinsics, cam: &CamFromWorld, c: &Correspondence, tau: f64) -> bool {
    let p = cam.apply(&c.point.coords);
    reprojection_error_cam(k, &p.into(), &c.pixel) < tau
}

/// Correspondences whose reprojection error is strictly below `tau`. Points
/// behind the camera are never inliers.
pub fn score_hypothesis(h: &Pose, corrs: &CorrespondenceSet, k: &Intrinsics, tau: f64) -> Score {
    let cam = CamFromWorld::from_pose(h);
    let inliers: Vec<usize> = corrs
        .entries
        .iter()
        .enumerate()
        .filter(|(_, c)| is_inlier(k, &cam, c, tau))
        .map(|(i, _)| i)
        .collect();
    Score {
        count: inliers.len(),
        inliers,
    }
}

fn count_inliers(cam: &CamFromWorld, corrs: &[Correspondence], k: &Intrinsics, tau: f64) -> usize {
    corrs.iter().filter(|c| is_inlier(k, cam, c, tau)).count()
}

/// One filled hypothesis slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Camera-to-world.
    pub pose: Pose,
    /// Inlier count over the full correspondence set.
    pub score: usize,
    /// Indices of the generating minimal sample.
    pub sample: [usize; 4],
    /// Minimal samples drawn for this slot.
    pub attempts: usize,
    /// `true` when all four sample points were inliers of the pose; `false`
    /// for the best-of-attempts fallback.
    pub accepted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// All refinement rounds ran.
    Completed,
    /// Fewer than the minimum number of inliers before a round.
    TooFewInliers,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Minimal samples drawn across all slots.
    pub sampling_attempts: usize,
    /// Slots filled by the best-of-attempts fallback.
    pub fallback_slots: usize,
    /// Slots where no minimal problem was solvable.
    pub empty_slots: usize,
    pub selected_hypothesis: usize,
    pub selected_score: usize,
    pub stop: StopReason,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationResult {
    /// Camera-to-world.
    pub pose: Pose,
    pub inlier_count: usize,
    pub hypotheses_evaluated: usize,
    pub refinement_rounds: usize,
    pub diagnostics: Diagnostics,
}

struct Candidate {
    cam: CamFromWorld,
    sample: [usize; 4],
    sample_inliers: usize,
    sample_error: f64,
}

/// Draws minimal samples until one yields a pose with all four points as
/// inliers, or the attempt budget runs out.
fn fill_slot(
    corrs: &[Correspondence],
    k: &Intrinsics,
    cfg: &RansacConfig,
    slot: usize,
) -> (Option<Hypothesis>, usize) {
    let mut rng = rng::stream(cfg.rng_seed, "hypothesis", slot as u64);
    let mut best: Option<Candidate> = None;
    let mut attempts = 0;
    let mut accepted = false;
    while attempts < cfg.max_sampling_attempts_per_hypothesis {
        attempts += 1;
        let idx = sample(&mut rng, corrs.len(), 4);
        let sample_idx = [idx.index(0), idx.index(1), idx.index(2), idx.index(3)];
        let minimal = sample_idx.map(|i| corrs[i]);
        let Ok(cam) = solve_minimal_cam(&minimal, k) else {
            continue;
        };
        let errors = minimal.map(|c| reprojection_error_cam(k, &cam.apply(&c.point.coords).into(), &c.pixel));
        let sample_inliers = errors.iter().filter(|&&e| e < cfg.inlier_threshold_px).count();
        let sample_error: f64 = errors.iter().sum();
        let better = match &best {
            None => true,
            Some(b) => {
                sample_inliers > b.sample_inliers
                    || (sample_inliers == b.sample_inliers && sample_error < b.sample_error)
            }
        };
        if better {
            best = Some(Candidate {
                cam,
                sample: sample_idx,
                sample_inliers,
                sample_error,
            });
        }
        if sample_inliers == 4 {
            accepted = true;
            break;
        }
    }
    let hyp = best.map(|b| Hypothesis {
        pose: b.cam.to_pose(),
        score: count_inliers(&b.cam, corrs, k, cfg.inlier_threshold_px),
        sample: b.sample,
        attempts,
        accepted,
    });
    (hyp, attempts)
}

/// All `K` hypothesis slots, in slot order. Slots run in parallel when the
/// `parallel` feature is enabled; each slot has its own random stream derived
/// from `(rng_seed, slot)`.
pub fn generate_hypotheses(
    corrs: &CorrespondenceSet,
    k: &Intrinsics,
    cfg: &RansacConfig,
) -> Vec<(Option<Hypothesis>, usize)> {
    par::map_range(cfg.n_hypotheses, |slot| fill_slot(&corrs.entries, k, cfg, slot))
}

/// Lowest-index hypothesis with the highest score.
pub fn select_best(hypotheses: &[Option<Hypothesis>]) -> Option<usize> {
    let mut best: Option<(usize, usize)> = None;
    for (i, h) in hypotheses.iter().enumerate() {
        if let Some(h) = h {
            if best.is_none_or(|(_, s)| h.score > s) {
                best = Some((i, h.score));
            }
        }
    }
    best.map(|(i, _)| i)
}

/// RANSAC pose estimation from 2D-3D correspondences: sample and score `K`
/// minimal-sample hypotheses, keep the argmax, then run up to `R` rounds of
/// re-scoring and least-squares refinement on at most `P` sampled inliers,
/// stopping early below `Q` inliers.
pub fn ransac_localize(
    corrs: &CorrespondenceSet,
    k: &Intrinsics,
    cfg: &RansacConfig,
) -> Result<LocalizationResult, SolverError> {
    cfg.validate()?;
    if corrs.len() < 4 {
        return Err(SolverError::TooFewCorrespondences { got: corrs.len() });
    }
    let slots = generate_hypotheses(corrs, k, cfg);
    let sampling_attempts: usize = slots.iter().map(|(_, a)| a).sum();
    let hypotheses: Vec<Option<Hypothesis>> = slots.into_iter().map(|(h, _)| h).collect();
    let empty_slots = hypotheses.iter().filter(|h| h.is_none()).count();
    let fallback_slots = hypotheses
        .iter()
        .filter(|h| h.as_ref().is_some_and(|h| !h.accepted))
        .count();
    let Some(selected) = select_best(&hypotheses) else {
        return Err(SolverError::NoPose {
            sampling_attempts,
            empty_slots,
        });
    };
    let chosen = hypotheses[selected].as_ref().expect("selected slot is filled");
    let selected_score = chosen.score;

    let mut pose = chosen.pose;
    let mut rounds = 0;
    let mut stop = StopReason::Completed;
    for round in 0..cfg.refine_steps {
        let score = score_hypothesis(&pose, corrs, k, cfg.inlier_threshold_px);
        if score.count < cfg.refine_min_inliers {
            stop = StopReason::TooFewInliers;
            break;
        }
        let mut rng = rng::stream(cfg.rng_seed, "refine", round as u64);
        let take = cfg.refine_inlier_cap.min(score.count);
        let picked: Vec<Correspondence> = sample(&mut rng, score.count, take)
            .into_iter()
            .map(|i| corrs.entries[score.inliers[i]])
            .collect();
        pose = refine_pose(&pose, &picked, k)?;
        rounds += 1;
    }
    let inlier_count = score_hypothesis(&pose, corrs, k, cfg.inlier_threshold_px).count;

    Ok(LocalizationResult {
        pose,
        inlier_count,
        hypotheses_evaluated: hypotheses.len() - empty_slots,
        refinement_rounds: rounds,
        diagnostics: Diagnostics {
            sampling_attempts,
            fallback_slots,
            empty_slots,
            selected_hypothesis: selected,
            selected_score,
            stop,
        },
    })
}
