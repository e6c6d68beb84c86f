//! Training-data augmentation in image space (2D similarity warp) and in
//! scene space (re-rendering the local point cloud from a perturbed camera).
//!
//! Every output carries enough information to project world points into the
//! augmented image: the 3D branch records the new camera pose, the 2D branch
//! keeps the original pose plus the image-plane warp applied after projection.

use image::{Rgb, RgbImage};
use nalgebra::{Point2, Unit, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, UnitSphere};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Intrinsics, PixelCoord, Pose, ScenePoint};
use crate::rng;
use crate::scene_map::{
    check_dims, to_point_cloud, SceneCoordinateImage, SceneMapError, ValidityMask,
};

/// Largest distance, in output pixels, allowed between an output pixel and
/// the warped position of the source pixel its label was copied from.
pub const MAX_LABEL_OFFSET_PX: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AugmentationError {
    #[error(transparent)]
    Resolution(#[from] SceneMapError),
    #[error("invalid augmentation config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    pub p_2d: f64,
    pub p_3d: f64,
    pub p_identity: f64,
    /// Translation range as a fraction of image width / height.
    pub trans_2d_frac: f64,
    pub rot_2d_deg: f64,
    pub scale_range: (f64, f64),
    pub rot_3d_deg_max: f64,
    pub trans_3d_mm_max: f64,
    pub rng_seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            p_2d: 0.40,
            p_3d: 0.50,
            p_identity: 0.10,
            trans_2d_frac: 0.20,
            rot_2d_deg: 45.0,
            scale_range: (0.7, 1.5),
            rot_3d_deg_max: 60.0,
            trans_3d_mm_max: 200.0,
            rng_seed: 0,
        }
    }
}

impl AugmentationConfig {
    /// Random stream for one frame, seeded from `(rng_seed, frame id)`.
    pub fn frame_rng(&self, frame_id: &str) -> rng::Rng {
        rng::Rng::seed_from_u64(rng::frame_seed(self.rng_seed, frame_id))
    }

    pub fn validate(&self) -> Result<(), AugmentationError> {
        let bad = |m: &str| Err(AugmentationError::InvalidConfig(m.to_string()));
        let probs = [self.p_2d, self.p_3d, self.p_identity];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("probabilities must lie in [0, 1]");
        }
        if (probs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("branch probabilities must sum to 1");
        }
        if !(self.trans_2d_frac >= 0.0 && self.rot_2d_deg >= 0.0) {
            return bad("2D ranges must be non-negative");
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return bad("scale range must satisfy 0 < min <= max");
        }
        if !(self.rot_3d_deg_max >= 0.0 && self.trans_3d_mm_max >= 0.0) {
            return bad("3D ranges must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine2dParams {
    /// Translation as a fraction of (width, height).
    pub translate_frac: [f64; 2],
    pub rotation_deg: f64,
    pub scale: f64,
    /// Fill color for pixels that map outside the source image.
    pub pad: [u8; 3],
}

impl Affine2dParams {
    pub fn identity() -> Self {
        Self {
            translate_frac: [0.0, 0.0],
            rotation_deg: 0.0,
            scale: 1.0,
            pad: [0, 0, 0],
        }
    }

    pub fn warp(&self, width: u32, height: u32) -> ImageWarp {
        ImageWarp {
            center: [(width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0],
            translation: [
                self.translate_frac[0] * width as f64,
                self.translate_frac[1] * height as f64,
            ],
            rotation_rad: self.rotation_deg.to_radians(),
            scale: self.scale,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reproject3dParams {
    pub axis: [f64; 3],
    pub angle_deg: f64,
    /// Camera-frame translation, mm.
    pub translation_mm: [f64; 3],
    /// Seed of the per-pixel padding colors.
    pub padding_seed: u64,
}

impl Reproject3dParams {
    pub fn identity() -> Self {
        Self {
            axis: [0.0, 0.0, 1.0],
            angle_deg: 0.0,
            translation_mm: [0.0; 3],
            padding_seed: 0,
        }
    }

    /// Camera-local perturbation; the new pose is `gt_pose ∘ perturbation`.
    pub fn perturbation(&self) -> Pose {
        let axis = Unit::new_normalize(Vector3::from(self.axis));
        let mut p = Pose::from_axis_angle(&axis, self.angle_deg.to_radians());
        p.translation = Vector3::from(self.translation_mm);
        p
    }
}

/// Which branch a sample came from, with its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "branch", rename_all = "snake_case")]
pub enum Augmentation {
    Identity,
    Affine2d(Affine2dParams),
    Reproject3d(Reproject3dParams),
}

impl Augmentation {
    pub fn name(&self) -> &'static str {
        match self {
            Augmentation::Identity => "identity",
            Augmentation::Affine2d(_) => "affine_2d",
            Augmentation::Reproject3d(_) => "reproject_3d",
        }
    }
}

/// Similarity warp of the image plane:
/// `q = center + translation + scale * R(rotation) * (p - center)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageWarp {
    pub center: [f64; 2],
    pub translation: [f64; 2],
    pub rotation_rad: f64,
    pub scale: f64,
}

impl ImageWarp {
    pub fn forward(&self, p: &PixelCoord) -> PixelCoord {
        let (s, c) = self.rotation_rad.sin_cos();
        let dx = p.x - self.center[0];
        let dy = p.y - self.center[1];
        Point2::new(
            self.center[0] + self.translation[0] + self.scale * (c * dx - s * dy),
            self.center[1] + self.translation[1] + self.scale * (s * dx + c * dy),
        )
    }

    pub fn inverse(&self, q: &PixelCoord) -> PixelCoord {
        let (s, c) = self.rotation_rad.sin_cos();
        let dx = (q.x - self.translation[0] - self.center[0]) / self.scale;
        let dy = (q.y - self.translation[1] - self.center[1]) / self.scale;
        Point2::new(
            self.center[0] + c * dx + s * dy,
            self.center[1] - s * dx + c * dy,
        )
    }
}

/// One augmented training triple.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSample {
    pub rgb: RgbImage,
    pub coords: SceneCoordinateImage,
    pub mask: ValidityMask,
    /// Ground-truth camera-to-world pose of the sample.
    pub pose: Pose,
    /// Image-plane warp applied after projection (2D branch only).
    pub warp: Option<ImageWarp>,
    pub augmentation: Augmentation,
}

impl AugmentedSample {
    /// Where a world point lands in this sample's image.
    pub fn project(&self, k: &Intrinsics, world: &ScenePoint) -> Option<PixelCoord> {
        let px = k.project(&self.pose.inverse().transform_point(world)).ok()?;
        Some(match &self.warp {
            Some(w) => w.forward(&px),
            None => px,
        })
    }
}

/// Draws a branch and its parameters.
pub fn sample_augmentation<R: Rng + ?Sized>(cfg: &AugmentationConfig, rng: &mut R) -> Augmentation {
    let u: f64 = rng.random();
    if u < cfg.p_2d {
        let f = cfg.trans_2d_frac;
        let (lo, hi) = cfg.scale_range;
        Augmentation::Affine2d(Affine2dParams {
            translate_frac: [rng.random_range(-f..=f), rng.random_range(-f..=f)],
            rotation_deg: rng.random_range(-cfg.rot_2d_deg..=cfg.rot_2d_deg),
            scale: rng.random_range(lo..=hi),
            pad: rng.random(),
        })
    } else if u < cfg.p_2d + cfg.p_3d {
        let axis: [f64; 3] = UnitSphere.sample(rng);
        let angle_deg = rng.random_range(0.0..=cfg.rot_3d_deg_max);
        let dir: [f64; 3] = UnitSphere.sample(rng);
        let mag = rng.random_range(0.0..=cfg.trans_3d_mm_max);
        Augmentation::Reproject3d(Reproject3dParams {
            axis,
            angle_deg,
            translation_mm: [dir[0] * mag, dir[1] * mag, dir[2] * mag],
            padding_seed: rng.random(),
        })
    } else {
        Augmentation::Identity
    }
}

fn bilinear(rgb: &RgbImage, sx: f64, sy: f64) -> Option<[u8; 3]> {
    let (w, h) = rgb.dimensions();
    if !(sx >= 0.0 && sy >= 0.0 && sx <= (w - 1) as f64 && sy <= (h - 1) as f64) {
        return None;
    }
    let x0 = sx.floor() as u32;
    let y0 = sy.floor() as u32;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = sx - x0 as f64;
    let fy = sy - y0 as f64;
    let p00 = rgb.get_pixel(x0, y0).0;
    let p10 = rgb.get_pixel(x1, y0).0;
    let p01 = rgb.get_pixel(x0, y1).0;
    let p11 = rgb.get_pixel(x1, y1).0;
    let mut out = [0u8; 3];
    for c in 0..3 {
        let v = p00[c] as f64 * (1.0 - fx) * (1.0 - fy)
            + p10[c] as f64 * fx * (1.0 - fy)
            + p01[c] as f64 * (1.0 - fx) * fy
            + p11[c] as f64 * fx * fy;
        out[c] = v.round().clamp(0.0, 255.0) as u8;
    }
    Some(out)
}

fn check_triple(
    rgb: &RgbImage,
    coords: &SceneCoordinateImage,
    mask: &ValidityMask,
) -> Result<(), SceneMapError> {
    check_dims("rgb", rgb.dimensions(), coords.dims())?;
    check_dims("mask", mask.dims(), coords.dims())
}

/// Applies one similarity warp to image, coordinates and mask.
///
/// RGB is sampled bilinearly, coordinates and mask nearest-neighbor. Labels
/// whose source pixel lands [`MAX_LABEL_OFFSET_PX`] or farther from the output
/// pixel after warping (only possible when upscaling by more than √2) are
/// dropped.
pub fn apply_affine_2d(
    rgb: &RgbImage,
    coords: &SceneCoordinateImage,
    mask: &ValidityMask,
    gt_pose: &Pose,
    params: &Affine2dParams,
) -> Result<AugmentedSample, AugmentationError> {
    check_triple(rgb, coords, mask)?;
    let (w, h) = coords.dims();
    let warp = params.warp(w, h);
    let mut out_rgb = RgbImage::new(w, h);
    let mut out_coords = SceneCoordinateImage::zeros(w, h);
    let mut out_mask = ValidityMask::new(w, h, false);
    for y in 0..h {
        for x in 0..w {
            let p = Point2::new(x as f64, y as f64);
            let src = warp.inverse(&p);
            let color = bilinear(rgb, src.x, src.y).unwrap_or(params.pad);
            out_rgb.put_pixel(x, y, Rgb(color));

            let nx = src.x.round();
            let ny = src.y.round();
            if nx < 0.0 || ny < 0.0 || nx >= w as f64 || ny >= h as f64 {
                continue;
            }
            let (sx, sy) = (nx as u32, ny as u32);
            if !mask.get(sx, sy) {
                continue;
            }
            let offset = (warp.forward(&Point2::new(nx, ny)) - p).norm();
            if offset < MAX_LABEL_OFFSET_PX {
                out_coords.set(x, y, &coords.get(sx, sy));
                out_mask.set(x, y, true);
            }
        }
    }
    Ok(AugmentedSample {
        rgb: out_rgb,
        coords: out_coords,
        mask: out_mask,
        pose: *gt_pose,
        warp: Some(warp),
        augmentation: Augmentation::Affine2d(*params),
    })
}

/// Re-renders the frame's local point cloud from `gt_pose ∘ perturbation`.
///
/// Points are splatted to the nearest pixel with a z-buffer. Pixels that
/// receive no point are mask 0 and get independent random colors.
pub fn apply_3d_reprojection(
    rgb: &RgbImage,
    coords: &SceneCoordinateImage,
    mask: &ValidityMask,
    k: &Intrinsics,
    gt_pose: &Pose,
    params: &Reproject3dParams,
) -> Result<AugmentedSample, AugmentationError> {
    check_triple(rgb, coords, mask)?;
    check_dims("intrinsics", (k.width, k.height), coords.dims())?;
    let (w, h) = coords.dims();
    let new_pose = gt_pose.compose(&params.perturbation());
    let world_to_cam = new_pose.inverse();

    let cloud = to_point_cloud(coords, mask, rgb)?;
    let mut zbuf = vec![f64::INFINITY; w as usize * h as usize];
    let mut winner: Vec<Option<usize>> = vec![None; zbuf.len()];
    for (i, cp) in cloud.iter().enumerate() {
        let p_cam = world_to_cam.transform_point(&cp.point);
        let Ok(px) = k.project(&p_cam) else {
            continue;
        };
        let (u, v) = (px.x.round(), px.y.round());
        if u < 0.0 || v < 0.0 || u >= w as f64 || v >= h as f64 {
            continue;
        }
        let idx = v as usize * w as usize + u as usize;
        if p_cam.z < zbuf[idx] {
            zbuf[idx] = p_cam.z;
            winner[idx] = Some(i);
        }
    }

    let mut pad_rng = rng::Rng::seed_from_u64(params.padding_seed);
    let mut out_rgb = RgbImage::new(w, h);
    let mut out_coords = SceneCoordinateImage::zeros(w, h);
    let mut out_mask = ValidityMask::new(w, h, false);
    for y in 0..h {
        for x in 0..w {
            match winner[y as usize * w as usize + x as usize] {
                Some(i) => {
                    out_rgb.put_pixel(x, y, Rgb(cloud[i].color));
                    out_coords.set(x, y, &cloud[i].point);
                    out_mask.set(x, y, true);
                }
                None => out_rgb.put_pixel(x, y, Rgb(pad_rng.random())),
            }
        }
    }
    Ok(AugmentedSample {
        rgb: out_rgb,
        coords: out_coords,
        mask: out_mask,
        pose: new_pose,
        warp: None,
        augmentation: Augmentation::Reproject3d(*params),
    })
}

/// Applies an already drawn augmentation.
pub fn apply_augmentation(
    rgb: &RgbImage,
    coords: &SceneCoordinateImage,
    mask: &ValidityMask,
    k: &Intrinsics,
    gt_pose: &Pose,
    aug: &Augmentation,
) -> Result<AugmentedSample, AugmentationError> {
    match aug {
        Augmentation::Identity => {
            check_triple(rgb, coords, mask)?;
            Ok(AugmentedSample {
                rgb: rgb.clone(),
                coords: coords.clone(),
                mask: mask.clone(),
                pose: *gt_pose,
                warp: None,
                augmentation: Augmentation::Identity,
            })
        }
        Augmentation::Affine2d(p) => apply_affine_2d(rgb, coords, mask, gt_pose, p),
        Augmentation::Reproject3d(p) => apply_3d_reprojection(rgb, coords, mask, k, gt_pose, p),
    }
}

/// Draws and applies one augmentation.
pub fn augment<R: Rng + ?Sized>(
    cfg: &AugmentationConfig,
    rng: &mut R,
    rgb: &RgbImage,
    coords: &SceneCoordinateImage,
    mask: &ValidityMask,
    k: &Intrinsics,
    gt_pose: &Pose,
) -> Result<AugmentedSample, AugmentationError> {
    let aug = sample_augmentation(cfg, rng);
    apply_augmentation(rgb, coords, mask, k, gt_pose, &aug)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::reprojection_error;
    use crate::scene_map::{scene_coords_from_depth, DepthImage};
    use nalgebra::{UnitQuaternion, Vector3};
    use rand_chacha::ChaCha8Rng;

    fn small_frame() -> (RgbImage, SceneCoordinateImage, ValidityMask, Intrinsics, Pose) {
        let k = Intrinsics::new(60.0, 60.0, 32.0, 24.0, 64, 48).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let depth: Vec<u16> = (0..64 * 48)
            .map(|i| {
                if i % 17 == 0 {
                    0
                } else {
                    1500 + ((i % 64) as u16) * 7 + rng.random_range(0..20)
                }
            })
            .collect();
        let depth = DepthImage::from_vec(64, 48, depth).unwrap();
        let pose = Pose::new(
            UnitQuaternion::from_euler_angles(0.1, 0.5, -0.2),
            Vector3::new(300.0, 100.0, -50.0),
        );
        let (coords, mask) = scene_coords_from_depth(&depth, &pose, &k).unwrap();
        let mut rgb = RgbImage::new(64, 48);
        for (x, y, p) in rgb.enumerate_pixels_mut() {
            *p = Rgb([(x * 4) as u8, (y * 5) as u8, ((x + y) * 3) as u8]);
        }
        (rgb, coords, mask, k, pose)
    }

    fn assert_consistent(s: &AugmentedSample, k: &Intrinsics) {
        let (w, h) = s.coords.dims();
        for y in 0..h {
            for x in 0..w {
                if s.mask.get(x, y) {
                    let px = s.project(k, &s.coords.get(x, y)).unwrap();
                    let d = (px - Point2::new(x as f64, y as f64)).norm();
                    assert!(d <= MAX_LABEL_OFFSET_PX, "pixel ({x},{y}) off by {d}");
                }
            }
        }
    }

    #[test]
    fn identity_affine_is_noop() {
        let (rgb, coords, mask, _, pose) = small_frame();
        let s = apply_affine_2d(&rgb, &coords, &mask, &pose, &Affine2dParams::identity()).unwrap();
        assert_eq!(s.rgb, rgb);
        assert_eq!(s.coords, coords);
        assert_eq!(s.mask, mask);
    }

    #[test]
    fn integer_translation_shifts_pixels() {
        let (rgb, coords, mask, _, pose) = small_frame();
        let params = Affine2dParams {
            translate_frac: [10.0 / 64.0, 0.0],
            ..Affine2dParams::identity()
        };
        let s = apply_affine_2d(&rgb, &coords, &mask, &pose, &params).unwrap();
        for y in 0..48 {
            for x in 0..54 {
                assert_eq!(s.rgb.get_pixel(x + 10, y), rgb.get_pixel(x, y));
                assert_eq!(s.mask.get(x + 10, y), mask.get(x, y));
                if mask.get(x, y) {
                    assert_eq!(s.coords.get(x + 10, y), coords.get(x, y));
                }
            }
            for x in 0..10 {
                assert!(!s.mask.get(x, y));
                assert_eq!(s.rgb.get_pixel(x, y).0, params.pad);
            }
        }
    }

    #[test]
    fn half_scale_matches_inverse_map_oracle() {
        let (rgb, coords, mask, k, pose) = small_frame();
        let params = Affine2dParams {
            scale: 0.5,
            pad: [1, 2, 3],
            ..Affine2dParams::identity()
        };
        let s = apply_affine_2d(&rgb, &coords, &mask, &pose, &params).unwrap();
        let (cx, cy) = (31.5, 23.5);
        for y in 0..48u32 {
            for x in 0..64u32 {
                // independent inverse map for a pure scaling about the center
                let sx = cx + (x as f64 - cx) * 2.0;
                let sy = cy + (y as f64 - cy) * 2.0;
                let (nx, ny) = (sx.round(), sy.round());
                let inside = nx >= 0.0 && ny >= 0.0 && nx < 64.0 && ny < 48.0;
                let expect = inside && mask.get(nx as u32, ny as u32);
                assert_eq!(s.mask.get(x, y), expect, "({x},{y})");
                if expect {
                    assert_eq!(s.coords.get(x, y), coords.get(nx as u32, ny as u32));
                }
            }
        }
        assert_consistent(&s, &k);
    }

    #[test]
    fn zero_perturbation_reproduces_frame() {
        let (rgb, coords, mask, k, pose) = small_frame();
        let s = apply_3d_reprojection(&rgb, &coords, &mask, &k, &pose, &Reproject3dParams::identity())
            .unwrap();
        assert_eq!(s.mask, mask);
        for y in 0..48 {
            for x in 0..64 {
                if s.mask.get(x, y) {
                    assert_eq!(s.rgb.get_pixel(x, y), rgb.get_pixel(x, y));
                    let e = reprojection_error(&k, &s.pose, &s.coords.get(x, y), &Point2::new(x as f64, y as f64));
                    assert!(e < 0.5);
                }
            }
        }
    }

    #[test]
    fn single_point_renders_at_projection() {
        let k = Intrinsics::new(60.0, 60.0, 32.0, 24.0, 64, 48).unwrap();
        let pose = Pose::identity();
        let mut coords = SceneCoordinateImage::zeros(64, 48);
        let mut mask = ValidityMask::new(64, 48, false);
        let world = ScenePoint::new(100.0, -50.0, 1000.0);
        coords.set(10, 10, &world);
        mask.set(10, 10, true);
        let mut rgb = RgbImage::new(64, 48);
        rgb.put_pixel(10, 10, Rgb([200, 100, 50]));
        let params = Reproject3dParams {
            axis: [0.0, 1.0, 0.0],
            angle_deg: 5.0,
            translation_mm: [30.0, 0.0, -40.0],
            padding_seed: 11,
        };
        let s = apply_3d_reprojection(&rgb, &coords, &mask, &k, &pose, &params).unwrap();
        // direct projection oracle
        let new_pose = pose.compose(&params.perturbation());
        let c = new_pose.inverse().transform_point(&world);
        let (u, v) = ((32.0 + 60.0 * c.x / c.z).round(), (24.0 + 60.0 * c.y / c.z).round());
        assert_eq!(s.mask.count(), 1);
        assert!(s.mask.get(u as u32, v as u32));
        assert_eq!(s.coords.get(u as u32, v as u32), world);
        assert_eq!(s.rgb.get_pixel(u as u32, v as u32).0, [200, 100, 50]);
        assert_eq!(s.pose, new_pose);
    }

    #[test]
    fn points_pushed_behind_camera_render_nothing() {
        let (rgb, coords, mask, k, pose) = small_frame();
        let params = Reproject3dParams {
            translation_mm: [0.0, 0.0, 100_000.0],
            ..Reproject3dParams::identity()
        };
        let s = apply_3d_reprojection(&rgb, &coords, &mask, &k, &pose, &params).unwrap();
        assert_eq!(s.mask.count(), 0);
    }

    #[test]
    fn zbuffer_keeps_nearest() {
        let k = Intrinsics::new(60.0, 60.0, 32.0, 24.0, 64, 48).unwrap();
        let mut coords = SceneCoordinateImage::zeros(64, 48);
        let mut mask = ValidityMask::new(64, 48, false);
        let mut rgb = RgbImage::new(64, 48);
        coords.set(0, 0, &ScenePoint::new(0.0, 0.0, 2000.0));
        coords.set(1, 0, &ScenePoint::new(0.0, 0.0, 1000.0));
        mask.set(0, 0, true);
        mask.set(1, 0, true);
        rgb.put_pixel(0, 0, Rgb([1, 1, 1]));
        rgb.put_pixel(1, 0, Rgb([2, 2, 2]));
        let s = apply_3d_reprojection(&rgb, &coords, &mask, &k, &Pose::identity(), &Reproject3dParams::identity())
            .unwrap();
        assert_eq!(s.mask.count(), 1);
        assert_eq!(s.coords.get(32, 24).z, 1000.0);
        assert_eq!(s.rgb.get_pixel(32, 24).0, [2, 2, 2]);
    }

    #[test]
    fn random_samples_are_consistent_and_deterministic() {
        let (rgb, coords, mask, k, pose) = small_frame();
        let cfg = AugmentationConfig::default();
        let mut rng_a = ChaCha8Rng::seed_from_u64(99);
        let mut rng_b = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..40 {
            let a = augment(&cfg, &mut rng_a, &rgb, &coords, &mask, &k, &pose).unwrap();
            let b = augment(&cfg, &mut rng_b, &rgb, &coords, &mask, &k, &pose).unwrap();
            assert_eq!(a, b);
            assert_consistent(&a, &k);
            if let Augmentation::Reproject3d(_) = a.augmentation {
                assert!(a.mask.count() <= mask.count());
            }
        }
    }

    #[test]
    fn identity_only_config() {
        let cfg = AugmentationConfig {
            p_2d: 0.0,
            p_3d: 0.0,
            p_identity: 1.0,
            ..Default::default()
        };
        cfg.validate().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            assert_eq!(sample_augmentation(&cfg, &mut rng), Augmentation::Identity);
        }
    }

    #[test]
    fn config_validation() {
        assert!(AugmentationConfig::default().validate().is_ok());
        let bad = AugmentationConfig {
            p_identity: 0.2,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = AugmentationConfig {
            scale_range: (1.5, 0.7),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn sampled_parameters_stay_in_range() {
        let cfg = AugmentationConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5000 {
            match sample_augmentation(&cfg, &mut rng) {
                Augmentation::Affine2d(p) => {
                    assert!(p.translate_frac.iter().all(|t| t.abs() <= 0.2));
                    assert!(p.rotation_deg.abs() <= 45.0);
                    assert!((0.7..=1.5).contains(&p.scale));
                }
                Augmentation::Reproject3d(p) => {
                    assert!((Vector3::from(p.axis).norm() - 1.0).abs() < 1e-9);
                    assert!((0.0..=60.0).contains(&p.angle_deg));
                    assert!(Vector3::from(p.translation_mm).norm() <= 200.0 + 1e-9);
                }
                Augmentation::Identity => {}
            }
        }
    }

    #[test]
    fn warp_inverse_round_trip() {
        let w = Affine2dParams {
            translate_frac: [0.1, -0.15],
            rotation_deg: 33.0,
            scale: 1.3,
            pad: [0; 3],
        }
        .warp(640, 480);
        let p = Point2::new(123.25, 400.5);
        assert!((w.inverse(&w.forward(&p)) - p).norm() < 1e-9);
        assert!((w.translation[0] - 64.0).abs() < 1e-9 && (w.translation[1] + 72.0).abs() < 1e-9);
    }
}
