//! Localization metrics: 5cm/5deg accuracy, median pose errors, cumulative
//! error histograms, and scene-coordinate inlier statistics.
//!
//! Unlocalized frames count as failures for accuracy and as infinite errors
//! for medians and histograms.

use std::collections::BTreeMap;
use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Pose, PoseError};
use crate::pose_solver::Diagnostics;
use crate::scene_map::{check_dims, SceneCoordinateImage, SceneMapError, ValidityMask};

pub const ACCURACY_TRANSLATION_MM: f64 = 50.0;
pub const ACCURACY_ROTATION_DEG: f64 = 5.0;
/// Scene-coordinate inlier threshold used when none is given.
pub const DEFAULT_INLIER_THRESHOLD_MM: f64 = 100.0;
/// Name of the aggregate over all scenes in reports.
pub const COMPLETE: &str = "complete";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no frames to evaluate")]
    Empty,
    #[error("histogram edges must be strictly increasing and not NaN")]
    UnsortedEdges,
    #[error("no masked-in pixels")]
    NoMaskedPixels,
    #[error("threshold must be positive, got {0}")]
    InvalidThreshold(f64),
    #[error(transparent)]
    Resolution(#[from] SceneMapError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

/// Outcome for one test frame; one line of a results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameResult {
    /// `scene/sequence/frame-XXXXXX`.
    pub frame: String,
    pub scene: String,
    pub localized: bool,
    /// Present iff `localized`.
    pub error: Option<PoseError>,
    /// Estimated camera-to-world pose, row-major 3x4, mm.
    pub pose: Option<[f64; 12]>,
    pub inlier_count: usize,
    pub diagnostics: Option<Diagnostics>,
    /// Why the frame was not localized.
    pub failure: Option<String>,
}

impl FrameResult {
    pub fn localized(frame: String, scene: String, pose: &Pose, error: PoseError, inliers: usize, diag: Diagnostics) -> Self {
        let m = pose.to_matrix();
        let mut flat = [0.0; 12];
        for r in 0..3 {
            for c in 0..4 {
                flat[r * 4 + c] = m[(r, c)];
            }
        }
        Self {
            frame,
            scene,
            localized: true,
            error: Some(error),
            pose: Some(flat),
            inlier_count: inliers,
            diagnostics: Some(diag),
            failure: None,
        }
    }

    pub fn failed(frame: String, scene: String, reason: String) -> Self {
        Self {
            frame,
            scene,
            localized: false,
            error: None,
            pose: None,
            inlier_count: 0,
            diagnostics: None,
            failure: Some(reason),
        }
    }

    /// Translational error in mm; `+inf` when unlocalized.
    pub fn translational_mm(&self) -> f64 {
        match (&self.error, self.localized) {
            (Some(e), true) => e.translational,
            _ => f64::INFINITY,
        }
    }

    /// Rotational error in degrees; `+inf` when unlocalized.
    pub fn rotational_deg(&self) -> f64 {
        match (&self.error, self.localized) {
            (Some(e), true) => e.rotational,
            _ => f64::INFINITY,
        }
    }
}

/// Fraction of frames with translational error below 5 cm and rotational
/// error below 5 degrees, both strict.
pub fn accuracy_5cm_5deg(results: &[FrameResult]) -> Result<f64, EvalError> {
    if results.is_empty() {
        return Err(EvalError::Empty);
    }
    let ok = results
        .iter()
        .filter(|r| r.translational_mm() < ACCURACY_TRANSLATION_MM && r.rotational_deg() < ACCURACY_ROTATION_DEG)
        .count();
    Ok(ok as f64 / results.len() as f64)
}

/// Lower median (order statistic `ceil(n/2)`), NaN-free input assumed.
fn lower_median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len().div_ceil(2) - 1]
}

/// Component-wise lower medians: `(cm, degrees)`.
pub fn median_pose_error(results: &[FrameResult]) -> Result<(f64, f64), EvalError> {
    if results.is_empty() {
        return Err(EvalError::Empty);
    }
    let t = lower_median(results.iter().map(|r| r.translational_mm() / 10.0).collect());
    let r = lower_median(results.iter().map(FrameResult::rotational_deg).collect());
    Ok((t, r))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorComponent {
    /// Centimeters.
    Translation,
    /// Degrees.
    Rotation,
}

impl ErrorComponent {
    pub fn name(self) -> &'static str {
        match self {
            ErrorComponent::Translation => "translation",
            ErrorComponent::Rotation => "rotation",
        }
    }

    fn value(self, r: &FrameResult) -> f64 {
        match self {
            ErrorComponent::Translation => r.translational_mm() / 10.0,
            ErrorComponent::Rotation => r.rotational_deg(),
        }
    }
}

fn check_edges(edges: &[f64]) -> Result<(), EvalError> {
    if edges.iter().any(|e| e.is_nan()) || edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(EvalError::UnsortedEdges);
    }
    Ok(())
}

/// Fraction of frames whose error is at most each edge. Translation edges are
/// in cm, rotation edges in degrees. Unlocalized frames only count at an edge
/// of `+inf`.
pub fn cumulative_error_histogram(
    results: &[FrameResult],
    edges: &[f64],
    component: ErrorComponent,
) -> Result<Vec<f64>, EvalError> {
    if results.is_empty() {
        return Err(EvalError::Empty);
    }
    check_edges(edges)?;
    let mut values: Vec<f64> = results.iter().map(|r| component.value(r)).collect();
    values.sort_by(f64::total_cmp);
    let n = values.len() as f64;
    Ok(edges
        .iter()
        .map(|&e| values.partition_point(|&v| v <= e) as f64 / n)
        .collect())
}

/// `count` edges `step, 2*step, ...` followed by `+inf`.
pub fn default_edges(step: f64, count: usize) -> Vec<f64> {
    let mut edges: Vec<f64> = (1..=count).map(|i| i as f64 * step).collect();
    edges.push(f64::INFINITY);
    edges
}

/// Bins for the scene-coordinate error histogram: `[i*w, (i+1)*w)` for
/// `i < bins`, then one overflow bin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorHistogramSpec {
    pub bin_width_mm: f64,
    pub bins: usize,
}

impl Default for ErrorHistogramSpec {
    fn default() -> Self {
        Self {
            bin_width_mm: 10.0,
            bins: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InlierStats {
    pub masked_pixels: usize,
    pub inliers: usize,
    pub inlier_fraction: f64,
    /// `None` when no pixel is an inlier.
    pub mean_inlier_error_mm: Option<f64>,
    /// Lower bin edges, mm; the last bin is open-ended.
    pub histogram_edges_mm: Vec<f64>,
    /// Fraction of masked-in pixels per bin; sums to 1.
    pub histogram: Vec<f64>,
}

/// Pools scene-coordinate errors over any number of maps.
#[derive(Debug, Clone)]
pub struct InlierAccumulator {
    threshold_mm: f64,
    spec: ErrorHistogramSpec,
    masked: usize,
    inliers: usize,
    sum: f64,
    counts: Vec<usize>,
}

impl InlierAccumulator {
    pub fn new(threshold_mm: f64, spec: ErrorHistogramSpec) -> Result<Self, EvalError> {
        if !(threshold_mm > 0.0) {
            return Err(EvalError::InvalidThreshold(threshold_mm));
        }
        Ok(Self {
            threshold_mm,
            spec,
            masked: 0,
            inliers: 0,
            sum: 0.0,
            counts: vec![0; spec.bins + 1],
        })
    }

    pub fn add(&mut self, pred: &SceneCoordinateImage, gt: &SceneCoordinateImage, mask: &ValidityMask) -> Result<(), EvalError> {
        check_dims("prediction", pred.dims(), gt.dims())?;
        check_dims("mask", mask.dims(), gt.dims())?;
        for ((p, g), &m) in pred.as_slice().iter().zip(gt.as_slice()).zip(mask.as_slice()) {
            if !m {
                continue;
            }
            self.masked += 1;
            let e = ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2) + (p[2] - g[2]).powi(2)).sqrt();
            if e < self.threshold_mm {
                self.inliers += 1;
                self.sum += e;
            }
            let bin = (e / self.spec.bin_width_mm).floor();
            let bin = if bin.is_finite() && bin < self.spec.bins as f64 {
                bin as usize
            } else {
                self.spec.bins
            };
            self.counts[bin] += 1;
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<InlierStats, EvalError> {
        if self.masked == 0 {
            return Err(EvalError::NoMaskedPixels);
        }
        let n = self.masked as f64;
        Ok(InlierStats {
            masked_pixels: self.masked,
            inliers: self.inliers,
            inlier_fraction: self.inliers as f64 / n,
            mean_inlier_error_mm: (self.inliers > 0).then(|| self.sum / self.inliers as f64),
            histogram_edges_mm: (0..=self.spec.bins).map(|i| i as f64 * self.spec.bin_width_mm).collect(),
            histogram: self.counts.iter().map(|&c| c as f64 / n).collect(),
        })
    }
}

/// Over masked-in pixels: fraction with `||pred - gt|| < threshold_mm`, mean
/// error of those, and a normalized error histogram.
pub fn scene_coord_inlier_stats(
    pred: &SceneCoordinateImage,
    gt: &SceneCoordinateImage,
    mask: &ValidityMask,
    threshold_mm: f64,
    spec: ErrorHistogramSpec,
) -> Result<InlierStats, EvalError> {
    let mut acc = InlierAccumulator::new(threshold_mm, spec)?;
    acc.add(pred, gt, mask)?;
    acc.finish()
}

/// Metrics for one scene or for all scenes together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMetrics {
    pub scene: String,
    pub frames: usize,
    pub unlocalized: usize,
    pub median_t_cm: f64,
    pub median_r_deg: f64,
    pub acc_5cm5deg: f64,
    pub translation_cumulative: Vec<f64>,
    pub rotation_cumulative: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Sorted by scene name.
    pub scenes: Vec<SceneMetrics>,
    pub complete: SceneMetrics,
    pub translation_edges_cm: Vec<f64>,
    pub rotation_edges_deg: Vec<f64>,
}

fn scene_metrics(scene: &str, results: &[FrameResult], t_edges: &[f64], r_edges: &[f64]) -> Result<SceneMetrics, EvalError> {
    let (median_t_cm, median_r_deg) = median_pose_error(results)?;
    Ok(SceneMetrics {
        scene: scene.to_string(),
        frames: results.len(),
        unlocalized: results.iter().filter(|r| !r.localized).count(),
        median_t_cm,
        median_r_deg,
        acc_5cm5deg: accuracy_5cm_5deg(results)?,
        translation_cumulative: cumulative_error_histogram(results, t_edges, ErrorComponent::Translation)?,
        rotation_cumulative: cumulative_error_histogram(results, r_edges, ErrorComponent::Rotation)?,
    })
}

/// Per-scene metrics plus the aggregate over every frame.
pub fn build_report(results: &[FrameResult], t_edges_cm: &[f64], r_edges_deg: &[f64]) -> Result<MetricReport, EvalError> {
    if results.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut by_scene: BTreeMap<&str, Vec<FrameResult>> = BTreeMap::new();
    for r in results {
        by_scene.entry(&r.scene).or_default().push(r.clone());
    }
    let scenes = by_scene
        .iter()
        .map(|(s, rs)| scene_metrics(s, rs, t_edges_cm, r_edges_deg))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(MetricReport {
        scenes,
        complete: scene_metrics(COMPLETE, results, t_edges_cm, r_edges_deg)?,
        translation_edges_cm: t_edges_cm.to_vec(),
        rotation_edges_deg: r_edges_deg.to_vec(),
    })
}

fn csv_string<F>(header: &[&str], fill: F) -> Result<String, EvalError>
where
    F: FnOnce(&mut csv::Writer<Vec<u8>>) -> Result<(), csv::Error>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    fill(&mut w)?;
    let bytes = w.into_inner().map_err(|e| EvalError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

impl MetricReport {
    fn rows(&self) -> impl Iterator<Item = &SceneMetrics> {
        self.scenes.iter().chain(std::iter::once(&self.complete))
    }

    /// `scene,frames,median_t_cm,median_r_deg,acc_5cm5deg`, one row per
    /// scene then `complete`.
    pub fn metrics_csv(&self) -> Result<String, EvalError> {
        csv_string(&["scene", "frames", "median_t_cm", "median_r_deg", "acc_5cm5deg"], |w| {
            for m in self.rows() {
                w.write_record([
                    m.scene.clone(),
                    m.frames.to_string(),
                    m.median_t_cm.to_string(),
                    m.median_r_deg.to_string(),
                    m.acc_5cm5deg.to_string(),
                ])?;
            }
            Ok(())
        })
    }

    /// `scene,frames,unlocalized`.
    pub fn failures_csv(&self) -> Result<String, EvalError> {
        csv_string(&["scene", "frames", "unlocalized"], |w| {
            for m in self.rows() {
                w.write_record([m.scene.clone(), m.frames.to_string(), m.unlocalized.to_string()])?;
            }
            Ok(())
        })
    }

    /// `edge,cumulative_fraction` for one scene (or `complete`).
    pub fn histogram_csv(&self, scene: &str, component: ErrorComponent) -> Option<Result<String, EvalError>> {
        let m = self.rows().find(|m| m.scene == scene)?;
        let (edges, values) = match component {
            ErrorComponent::Translation => (&self.translation_edges_cm, &m.translation_cumulative),
            ErrorComponent::Rotation => (&self.rotation_edges_deg, &m.rotation_cumulative),
        };
        Some(histogram_csv(edges, values))
    }

    pub fn scene_names(&self) -> Vec<String> {
        self.rows().map(|m| m.scene.clone()).collect()
    }
}

pub fn histogram_csv(edges: &[f64], values: &[f64]) -> Result<String, EvalError> {
    csv_string(&["edge", "cumulative_fraction"], |w| {
        for (e, v) in edges.iter().zip(values) {
            w.write_record([e.to_string(), v.to_string()])?;
        }
        Ok(())
    })
}

/// `lower_edge_mm,fraction` for a scene-coordinate error histogram.
pub fn inlier_histogram_csv(stats: &InlierStats) -> Result<String, EvalError> {
    csv_string(&["lower_edge_mm", "fraction"], |w| {
        for (e, v) in stats.histogram_edges_mm.iter().zip(&stats.histogram) {
            w.write_record([e.to_string(), v.to_string()])?;
        }
        Ok(())
    })
}
