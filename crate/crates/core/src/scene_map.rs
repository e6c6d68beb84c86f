//! Dense scene-coordinate images, validity masks and depth maps.

use image::RgbImage;
use nalgebra::{Point2, Point3};
use thiserror::Error;

use crate::geometry::{Intrinsics, Pose, ScenePoint};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SceneMapError {
    #[error("resolution mismatch: {what} is {got_w}x{got_h}, expected {want_w}x{want_h}")]
    ResolutionMismatch {
        what: &'static str,
        got_w: u32,
        got_h: u32,
        want_w: u32,
        want_h: u32,
    },
    #[error("buffer length {got} does not match {width}x{height}")]
    BadBufferLength { got: usize, width: u32, height: u32 },
}

pub(crate) fn check_dims(
    what: &'static str,
    got: (u32, u32),
    want: (u32, u32),
) -> Result<(), SceneMapError> {
    if got != want {
        return Err(SceneMapError::ResolutionMismatch {
            what,
            got_w: got.0,
            got_h: got.1,
            want_w: want.0,
            want_h: want.1,
        });
    }
    Ok(())
}

/// Per-pixel world coordinates in mm, row-major.
///
/// Values are kept in `f64` in memory. The on-disk map format stores `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneCoordinateImage {
    width: u32,
    height: u32,
    data: Vec<[f64; 3]>,
}

impl SceneCoordinateImage {
    /// All pixels at the `(0, 0, 0)` placeholder.
    pub fn zeros(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![[0.0; 3]; width as usize * height as usize],
        }
    }

    pub fn from_vec(width: u32, height: u32, data: Vec<[f64; 3]>) -> Result<Self, SceneMapError> {
        if data.len() != width as usize * height as usize {
            return Err(SceneMapError::BadBufferLength {
                got: data.len(),
                width,
                height,
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn as_slice(&self) -> &[[f64; 3]] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [[f64; 3]] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, x: u32, y: u32) -> usize {
        y as usize * self.width as usize + x as usize
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> ScenePoint {
        Point3::from(self.data[self.index(x, y)])
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, p: &ScenePoint) {
        let i = self.index(x, y);
        self.data[i] = [p.x, p.y, p.z];
    }
}

/// Per-pixel flag: 1 where a ground-truth scene coordinate exists.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ValidityMask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl ValidityMask {
    pub fn new(width: u32, height: u32, value: bool) -> Self {
        Self {
            width,
            height,
            bits: vec![value; width as usize * height as usize],
        }
    }

    pub fn from_vec(width: u32, height: u32, bits: Vec<bool>) -> Result<Self, SceneMapError> {
        if bits.len() != width as usize * height as usize {
            return Err(SceneMapError::BadBufferLength {
                got: bits.len(),
                width,
                height,
            });
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.bits
    }

    pub fn as_mut_slice(&mut self) -> &mut [bool] {
        &mut self.bits
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, v: bool) {
        self.bits[y as usize * self.width as usize + x as usize] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// 16-bit depth in millimeters. `0` and `65535` both mean "no measurement".
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DepthImage {
    width: u32,
    height: u32,
    depth: Vec<u16>,
}

impl DepthImage {
    pub const INVALID_ZERO: u16 = 0;
    pub const INVALID_MAX: u16 = u16::MAX;

    pub fn from_vec(width: u32, height: u32, depth: Vec<u16>) -> Result<Self, SceneMapError> {
        if depth.len() != width as usize * height as usize {
            return Err(SceneMapError::BadBufferLength {
                got: depth.len(),
                width,
                height,
            });
        }
        Ok(Self {
            width,
            height,
            depth,
        })
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn as_slice(&self) -> &[u16] {
        &self.depth
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> u16 {
        self.depth[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn is_valid_value(d: u16) -> bool {
        d != Self::INVALID_ZERO && d != Self::INVALID_MAX
    }

    /// Depth in mm if the pixel holds a measurement.
    #[inline]
    pub fn valid_depth(&self, x: u32, y: u32) -> Option<f64> {
        let d = self.get(x, y);
        Self::is_valid_value(d).then_some(d as f64)
    }
}

/// Ground-truth scene coordinates from registered depth.
///
/// Pixel `(col, row)` is backprojected at integer coordinates `u = col`,
/// `v = row` and moved into the world by the camera-to-world `pose`.
pub fn scene_coords_from_depth(
    depth: &DepthImage,
    pose: &Pose,
    k: &Intrinsics,
) -> Result<(SceneCoordinateImage, ValidityMask), SceneMapError> {
    check_dims("depth", depth.dims(), (k.width, k.height))?;
    let (w, h) = depth.dims();
    let mut coords = SceneCoordinateImage::zeros(w, h);
    let mut mask = ValidityMask::new(w, h, false);
    for y in 0..h {
        for x in 0..w {
            if let Some(d) = depth.valid_depth(x, y) {
                let px = Point2::new(x as f64, y as f64);
                // d > 0 for valid codes, so backprojection cannot fail
                let p_cam = k.backproject(&px, d).expect("valid depth");
                coords.set(x, y, &pose.transform_point(&p_cam));
                mask.set(x, y, true);
            }
        }
    }
    Ok((coords, mask))
}

/// Result of the masked coordinate loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoordinateLoss {
    /// Sum over masked-in pixels of the Euclidean distance, mm.
    pub sum: f64,
    /// Number of masked-in pixels.
    pub count: usize,
}

impl CoordinateLoss {
    /// Mean distance over masked-in pixels, `None` when the mask is empty.
    pub fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }
}

/// `sum_ij M_ij * |pred_ij - gt_ij|`.
pub fn masked_coordinate_loss(
    pred: &SceneCoordinateImage,
    gt: &SceneCoordinateImage,
    mask: &ValidityMask,
) -> Result<CoordinateLoss, SceneMapError> {
    check_dims("prediction", pred.dims(), gt.dims())?;
    check_dims("mask", mask.dims(), gt.dims())?;
    let mut sum = 0.0;
    let mut count = 0;
    for ((p, g), &m) in pred.data.iter().zip(&gt.data).zip(&mask.bits) {
        if m {
            let dx = p[0] - g[0];
            let dy = p[1] - g[1];
            let dz = p[2] - g[2];
            sum += (dx * dx + dy * dy + dz * dz).sqrt();
            count += 1;
        }
    }
    Ok(CoordinateLoss { sum, count })
}

/// One point of a frame's local cloud.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CloudPoint {
    pub point: ScenePoint,
    pub color: [u8; 3],
    /// Source pixel `(col, row)`.
    pub pixel: (u32, u32),
}

/// Masked-in pixels as colored world points, row-major.
pub fn to_point_cloud(
    coords: &SceneCoordinateImage,
    mask: &ValidityMask,
    rgb: &RgbImage,
) -> Result<Vec<CloudPoint>, SceneMapError> {
    check_dims("mask", mask.dims(), coords.dims())?;
    check_dims("rgb", rgb.dimensions(), coords.dims())?;
    let (w, h) = coords.dims();
    let mut out = Vec::with_capacity(mask.count());
    for y in 0..h {
        for x in 0..w {
            if mask.get(x, y) {
                out.push(CloudPoint {
                    point: coords.get(x, y),
                    color: rgb.get_pixel(x, y).0,
                    pixel: (x, y),
                });
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::reprojection_error;
    use nalgebra::{UnitQuaternion, Vector3};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn principal_point_pixel_lifts_onto_optical_axis() {
        let k = Intrinsics::seven_scenes();
        let mut d = vec![0u16; 640 * 480];
        d[240 * 640 + 320] = 2000;
        d[0] = u16::MAX;
        let depth = DepthImage::from_vec(640, 480, d).unwrap();
        let (coords, mask) = scene_coords_from_depth(&depth, &Pose::identity(), &k).unwrap();
        assert!(mask.get(320, 240));
        assert_eq!(coords.get(320, 240), Point3::new(0.0, 0.0, 2000.0));
        assert!(!mask.get(0, 0));
        assert!(!mask.get(1, 0));
        assert_eq!(mask.count(), 1);
        assert_eq!(coords.get(0, 0), Point3::origin());
    }

    #[test]
    fn depth_resolution_mismatch() {
        let k = Intrinsics::seven_scenes();
        let depth = DepthImage::from_vec(4, 4, vec![1000; 16]).unwrap();
        assert!(matches!(
            scene_coords_from_depth(&depth, &Pose::identity(), &k),
            Err(SceneMapError::ResolutionMismatch { .. })
        ));
    }

    #[test]
    fn random_frame_reprojects_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let k = Intrinsics::new(100.0, 110.0, 40.0, 30.0, 80, 60).unwrap();
        let depth: Vec<u16> = (0..80 * 60)
            .map(|_| {
                if rng.random_bool(0.1) {
                    0
                } else {
                    rng.random_range(300..6000)
                }
            })
            .collect();
        let depth = DepthImage::from_vec(80, 60, depth).unwrap();
        let pose = Pose::new(
            UnitQuaternion::from_euler_angles(0.4, -1.0, 2.0),
            Vector3::new(500.0, -1200.0, 300.0),
        );
        let (coords, mask) = scene_coords_from_depth(&depth, &pose, &k).unwrap();
        let mut checked = 0;
        for y in 0..60 {
            for x in 0..80 {
                assert_eq!(mask.get(x, y), DepthImage::is_valid_value(depth.get(x, y)));
                if mask.get(x, y) {
                    let err = reprojection_error(
                        &k,
                        &pose,
                        &coords.get(x, y),
                        &Point2::new(x as f64, y as f64),
                    );
                    assert!(err < 1e-6, "{err}");
                    checked += 1;
                }
            }
        }
        assert_eq!(checked, mask.count());
    }

    #[test]
    fn loss_examples() {
        let gt = SceneCoordinateImage::from_vec(2, 1, vec![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap();
        let mut pred = gt.clone();
        let full = ValidityMask::new(2, 1, true);
        assert_eq!(masked_coordinate_loss(&gt, &gt, &full).unwrap().sum, 0.0);

        pred.as_mut_slice()[0] = [4.0, 6.0, 3.0];
        pred.as_mut_slice()[1] = [100.0, 5.0, 6.0];
        let one = ValidityMask::from_vec(2, 1, vec![true, false]).unwrap();
        let l = masked_coordinate_loss(&pred, &gt, &one).unwrap();
        assert_eq!(l.sum, 5.0);
        assert_eq!(l.count, 1);
        assert_eq!(l.mean(), Some(5.0));

        let none = ValidityMask::new(2, 1, false);
        let l = masked_coordinate_loss(&pred, &gt, &none).unwrap();
        assert_eq!((l.sum, l.count, l.mean()), (0.0, 0, None));

        let bad = ValidityMask::new(1, 1, true);
        assert!(masked_coordinate_loss(&pred, &gt, &bad).is_err());
    }

    #[test]
    fn point_cloud_entries() {
        let coords = SceneCoordinateImage::from_vec(2, 2, vec![[1.0; 3], [2.0; 3], [3.0; 3], [4.0; 3]]).unwrap();
        let mut rgb = RgbImage::new(2, 2);
        rgb.put_pixel(0, 1, image::Rgb([9, 8, 7]));
        assert!(to_point_cloud(&coords, &ValidityMask::new(2, 2, false), &rgb)
            .unwrap()
            .is_empty());
        let mask = ValidityMask::from_vec(2, 2, vec![false, false, true, false]).unwrap();
        let cloud = to_point_cloud(&coords, &mask, &rgb).unwrap();
        assert_eq!(
            cloud,
            vec![CloudPoint {
                point: Point3::new(3.0, 3.0, 3.0),
                color: [9, 8, 7],
                pixel: (0, 1),
            }]
        );
        assert!(to_point_cloud(&coords, &mask, &RgbImage::new(3, 2)).is_err());
    }

    fn arb_image(n: usize) -> impl Strategy<Value = Vec<[f64; 3]>> {
        prop::collection::vec(prop::array::uniform3(-1e4f64..1e4), n)
    }

    proptest! {
        #[test]
        fn loss_properties(
            a in arb_image(12),
            b in arb_image(12),
            c in arb_image(12),
            bits in prop::collection::vec(any::<bool>(), 12),
            extra in 0usize..12,
        ) {
            let a = SceneCoordinateImage::from_vec(4, 3, a).unwrap();
            let b = SceneCoordinateImage::from_vec(4, 3, b).unwrap();
            let c = SceneCoordinateImage::from_vec(4, 3, c).unwrap();
            let m = ValidityMask::from_vec(4, 3, bits.clone()).unwrap();
            let lab = masked_coordinate_loss(&a, &b, &m).unwrap().sum;
            prop_assert_eq!(masked_coordinate_loss(&a, &a, &m).unwrap().sum, 0.0);
            prop_assert_eq!(lab, masked_coordinate_loss(&b, &a, &m).unwrap().sum);
            let lbc = masked_coordinate_loss(&b, &c, &m).unwrap().sum;
            let lac = masked_coordinate_loss(&a, &c, &m).unwrap().sum;
            prop_assert!(lac <= lab + lbc + 1e-9 * (lab + lbc));
            let mut more = bits;
            more[extra] = true;
            let m2 = ValidityMask::from_vec(4, 3, more).unwrap();
            prop_assert!(masked_coordinate_loss(&a, &b, &m2).unwrap().sum >= lab);
        }

        #[test]
        fn point_cloud_count_is_popcount(bits in prop::collection::vec(any::<bool>(), 20)) {
            let coords = SceneCoordinateImage::zeros(5, 4);
            let mask = ValidityMask::from_vec(5, 4, bits.clone()).unwrap();
            let cloud = to_point_cloud(&coords, &mask, &RgbImage::new(5, 4)).unwrap();
            prop_assert_eq!(cloud.len(), bits.iter().filter(|&&b| b).count());
            prop_assert!(cloud.windows(2).all(|w| (w[0].pixel.1, w[0].pixel.0) < (w[1].pixel.1, w[1].pixel.0)));
        }
    }
}
