//! Sources of dense scene-coordinate predictions and the correspondence grid
//! sampler that feeds the pose solver.
//!
//! A trained regressor is outside this crate. Its output can be ingested as
//! SCRD files ([`MapDirectorySource`]); for experiments without a network,
//! [`OracleSource`] corrupts ground truth with Gaussian noise and uniform
//! outliers. Prediction maps hold world-frame coordinates in mm for a
//! camera-to-world pose convention.

use std::path::{Path, PathBuf};

use nalgebra::{Point2, Point3};
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset_io::{self, FrameRecord, ScrdError};
use crate::geometry::{PixelCoord, ScenePoint};
use crate::rng;
use crate::scene_map::{scene_coords_from_depth, SceneCoordinateImage, SceneMapError, ValidityMask};

pub use crate::dataset_io::load_scene_coord_image as load_prediction_map;

#[derive(Debug, Error)]
pub enum PredictError {
    #[error(transparent)]
    Map(#[from] ScrdError),
    #[error(transparent)]
    SceneMap(#[from] SceneMapError),
    #[error("prediction for {frame} is {got_w}x{got_h}, image is {want_w}x{want_h}")]
    Resolution {
        frame: String,
        got_w: u32,
        got_h: u32,
        want_w: u32,
        want_h: u32,
    },
    #[error("grid {grid_w}x{grid_h} is larger than the {width}x{height} image")]
    GridTooLarge {
        grid_w: u32,
        grid_h: u32,
        width: u32,
        height: u32,
    },
    #[error("invalid oracle config: {0}")]
    InvalidConfig(String),
}

/// Dense prediction: coordinates plus a validity mask, at image resolution.
pub type Prediction = (SceneCoordinateImage, ValidityMask);

/// Anything that maps a frame to a full-resolution scene-coordinate map.
/// Implementations must tolerate concurrent calls.
pub trait PredictionSource: Send + Sync {
    fn predict(&self, frame: &FrameRecord) -> Result<Prediction, PredictError>;
}

/// Axis-aligned world box in mm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldBox {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl WorldBox {
    pub fn is_valid(&self) -> bool {
        (0..3).all(|i| self.min[i].is_finite() && self.max[i].is_finite() && self.min[i] < self.max[i])
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ScenePoint {
        Point3::new(
            rng.random_range(self.min[0]..self.max[0]),
            rng.random_range(self.min[1]..self.max[1]),
            rng.random_range(self.min[2]..self.max[2]),
        )
    }

    pub fn contains(&self, p: &ScenePoint) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub noise_sigma_mm: f64,
    pub outlier_fraction: f64,
    pub outlier_bounds: WorldBox,
    pub rng_seed: u64,
}

impl OracleConfig {
    pub fn validate(&self) -> Result<(), PredictError> {
        if !(self.noise_sigma_mm >= 0.0 && self.noise_sigma_mm.is_finite()) {
            return Err(PredictError::InvalidConfig("noise sigma must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.outlier_fraction) {
            return Err(PredictError::InvalidConfig(
                "outlier fraction must lie in [0, 1]".into(),
            ));
        }
        if !self.outlier_bounds.is_valid() {
            return Err(PredictError::InvalidConfig("outlier box is degenerate".into()));
        }
        Ok(())
    }
}

/// Corrupts ground truth the way an imperfect regressor would.
///
/// Masked-in pixels become a uniform draw from the outlier box with
/// probability `outlier_fraction`, otherwise ground truth plus isotropic
/// Gaussian noise. Masked-out pixels get a uniform box draw. The output mask
/// is all ones.
pub fn oracle_predict<R: Rng + ?Sized>(
    cfg: &OracleConfig,
    gt_coords: &SceneCoordinateImage,
    gt_mask: &ValidityMask,
    rng: &mut R,
) -> Result<Prediction, PredictError> {
    cfg.validate()?;
    crate::scene_map::check_dims("mask", gt_mask.dims(), gt_coords.dims())?;
    let (w, h) = gt_coords.dims();
    let noise = Normal::new(0.0, cfg.noise_sigma_mm).expect("sigma validated");
    let mut out = SceneCoordinateImage::zeros(w, h);
    for (i, (gt, &valid)) in gt_coords.as_slice().iter().zip(gt_mask.as_slice()).enumerate() {
        let p = if valid && !rng.random_bool(cfg.outlier_fraction) {
            let mut p = *gt;
            if cfg.noise_sigma_mm > 0.0 {
                for c in &mut p {
                    *c += noise.sample(rng);
                }
            }
            p
        } else {
            let s = cfg.outlier_bounds.sample(rng);
            [s.x, s.y, s.z]
        };
        out.as_mut_slice()[i] = p;
    }
    Ok((out, ValidityMask::new(w, h, true)))
}

/// Oracle over ground truth computed from each frame's depth and pose. The
/// random stream of a frame is seeded from `(rng_seed, frame id)`.
#[derive(Debug, Clone)]
pub struct OracleSource {
    pub config: OracleConfig,
}

impl OracleSource {
    pub fn new(config: OracleConfig) -> Result<Self, PredictError> {
        config.validate()?;
        Ok(Self { config })
    }
}

impl PredictionSource for OracleSource {
    fn predict(&self, frame: &FrameRecord) -> Result<Prediction, PredictError> {
        let (gt, mask) = scene_coords_from_depth(&frame.depth, &frame.pose, &frame.intrinsics)?;
        let mut rng = rng::Rng::seed_from_u64(rng::frame_seed(
            self.config.rng_seed,
            &frame.id.to_string(),
        ));
        oracle_predict(&self.config, &gt, &mask, &mut rng)
    }
}

/// Reads `<dir>/<scene>/<sequence>/frame-XXXXXX.scrd` for each frame.
#[derive(Debug, Clone)]
pub struct MapDirectorySource {
    pub dir: PathBuf,
}

impl MapDirectorySource {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn map_path(dir: &Path, frame: &dataset_io::FrameId) -> PathBuf {
        dir.join(&frame.scene)
            .join(&frame.sequence)
            .join(format!("{}.scrd", frame.stem()))
    }
}

impl PredictionSource for MapDirectorySource {
    fn predict(&self, frame: &FrameRecord) -> Result<Prediction, PredictError> {
        let (coords, mask) = load_prediction_map(&Self::map_path(&self.dir, &frame.id))?;
        let want = frame.rgb.dimensions();
        if coords.dims() != want {
            return Err(PredictError::Resolution {
                frame: frame.id.to_string(),
                got_w: coords.width(),
                got_h: coords.height(),
                want_w: want.0,
                want_h: want.1,
            });
        }
        Ok((coords, mask))
    }
}

/// One 2D-3D match.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub pixel: PixelCoord,
    pub point: ScenePoint,
}

/// The matches handed to RANSAC.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorrespondenceSet {
    pub entries: Vec<Correspondence>,
}

impl CorrespondenceSet {
    pub fn new(entries: Vec<Correspondence>) -> Self {
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Column/row of cell `i` of `cells` equal cells spanning `extent` pixels:
/// `floor((i + 0.5) * extent / cells)`.
fn cell_center(i: u32, extent: u32, cells: u32) -> u32 {
    ((2 * i as u64 + 1) * extent as u64 / (2 * cells as u64)) as u32
}

/// Picks one prediction at the center of every cell of a `grid_w x grid_h`
/// lattice, row-major. The mask is ignored: bad predictions are RANSAC's job.
pub fn sample_grid(
    pred: &SceneCoordinateImage,
    _mask: &ValidityMask,
    grid_w: u32,
    grid_h: u32,
) -> Result<CorrespondenceSet, PredictError> {
    let (w, h) = pred.dims();
    if grid_w == 0 || grid_h == 0 || grid_w > w || grid_h > h {
        return Err(PredictError::GridTooLarge {
            grid_w,
            grid_h,
            width: w,
            height: h,
        });
    }
    let mut entries = Vec::with_capacity(grid_w as usize * grid_h as usize);
    for r in 0..grid_h {
        let y = cell_center(r, h, grid_h);
        for c in 0..grid_w {
            let x = cell_center(c, w, grid_w);
            entries.push(Correspondence {
                pixel: Point2::new(x as f64, y as f64),
                point: pred.get(x, y),
            });
        }
    }
    Ok(CorrespondenceSet { entries })
}
