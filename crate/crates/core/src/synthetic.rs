//! Procedural test scene: a textured room with a few boxes in it, rendered by
//! exact ray casting. Depth is the camera-frame z of the first hit rounded to
//! whole mm, so ground truth derived from it is exact up to that rounding.

use std::fs;
use std::io;
use std::path::Path;

use image::{Rgb, RgbImage};
use nalgebra::{Point2, Point3, Rotation3, UnitQuaternion, Vector3};
use rand::Rng;

use crate::dataset_io::{write_frame_files, FrameId, FrameRecord, ImageIoError};
use crate::geometry::{Intrinsics, Pose, ScenePoint};
use crate::predictor::WorldBox;
use crate::rng;
use crate::scene_map::DepthImage;

/// Axis-aligned box in world mm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Self {
        Self {
            min: Vector3::from(min),
            max: Vector3::from(max),
        }
    }

    /// Entry and exit ray parameters, if the ray line meets the box.
    fn slab(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, f64)> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for i in 0..3 {
            if d[i] == 0.0 {
                if o[i] < self.min[i] || o[i] > self.max[i] {
                    return None;
                }
                continue;
            }
            let a = (self.min[i] - o[i]) / d[i];
            let b = (self.max[i] - o[i]) / d[i];
            t0 = t0.max(a.min(b));
            t1 = t1.min(a.max(b));
        }
        (t0 <= t1).then_some((t0, t1))
    }

    fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }
}

/// Room interior plus solid obstacles, and the region cameras are placed in.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub room: Aabb,
    pub obstacles: Vec<Aabb>,
    pub camera_region: Aabb,
    /// Checker cell size of the texture, mm.
    pub texture_cell_mm: f64,
}

impl Default for SyntheticScene {
    fn default() -> Self {
        Self {
            room: Aabb::new([-2500.0, -1400.0, -2500.0], [2500.0, 1400.0, 2500.0]),
            obstacles: vec![
                // table, cabinet, shelf, pillar
                Aabb::new([1200.0, 600.0, -900.0], [2100.0, 1400.0, 300.0]),
                Aabb::new([-2500.0, -200.0, 1300.0], [-1600.0, 1400.0, 2500.0]),
                Aabb::new([-900.0, -1400.0, -2500.0], [700.0, -700.0, -2000.0]),
                Aabb::new([-1700.0, -1400.0, -1700.0], [-1300.0, 1400.0, -1300.0]),
            ],
            camera_region: Aabb::new([-800.0, -400.0, -800.0], [800.0, 300.0, 800.0]),
            texture_cell_mm: 200.0,
        }
    }
}

/// First surface hit along a ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub point: Vector3<f64>,
    /// 0 for the room shell, `i + 1` for obstacle `i`.
    pub surface: usize,
}

impl SyntheticScene {
    /// Ray from inside the room; `d` need not be normalized.
    pub fn raycast(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<Hit> {
        let (_, t_exit) = self.room.slab(o, d)?;
        let mut best = Hit {
            t: t_exit,
            point: o + d * t_exit,
            surface: 0,
        };
        for (i, b) in self.obstacles.iter().enumerate() {
            if let Some((t0, _)) = b.slab(o, d) {
                if t0 > 0.0 && t0 < best.t {
                    best = Hit {
                        t: t0,
                        point: o + d * t0,
                        surface: i + 1,
                    };
                }
            }
        }
        (best.t > 0.0 && best.t.is_finite()).then_some(best)
    }

    fn color(&self, hit: &Hit) -> Rgb<u8> {
        let c = (hit.point / self.texture_cell_mm).map(f64::floor);
        let parity = (c.x + c.y + c.z).rem_euclid(2.0) as u8;
        let base: [u8; 3] = match hit.surface % 5 {
            0 => [200, 190, 170],
            1 => [140, 90, 60],
            2 => [70, 110, 160],
            3 => [90, 150, 90],
            _ => [170, 170, 190],
        };
        // smooth variation so neighbouring cells differ
        let v = ((hit.point.x * 0.003).sin() + (hit.point.y * 0.004).cos() + (hit.point.z * 0.005).sin()) * 12.0;
        Rgb(base.map(|b| {
            let shade = if parity == 1 { b as f64 * 0.55 } else { b as f64 };
            (shade + v).clamp(0.0, 255.0) as u8
        }))
    }

    /// Color and depth as seen from camera-to-world `pose`.
    pub fn render(&self, k: &Intrinsics, pose: &Pose) -> (RgbImage, DepthImage) {
        let (w, h) = (k.width, k.height);
        let r = pose.rotation_matrix();
        let o = pose.translation;
        let mut rgb = RgbImage::new(w, h);
        let mut depth = vec![0u16; (w * h) as usize];
        for y in 0..h {
            for x in 0..w {
                let ray = k.ray(&Point2::new(x as f64, y as f64));
                let Some(hit) = self.raycast(&o, &(r * ray)) else {
                    continue;
                };
                // ray has unit z, so t is the camera-frame depth
                let z = hit.t.round();
                if z >= 1.0 && z < u16::MAX as f64 {
                    depth[(y * w + x) as usize] = z as u16;
                    rgb.put_pixel(x, y, self.color(&hit));
                }
            }
        }
        let depth = DepthImage::from_vec(w, h, depth).expect("buffer sized to intrinsics");
        (rgb, depth)
    }

    /// Points on a regular lattice over every visible face, `spacing` mm apart.
    pub fn surface_points(&self, spacing: f64) -> Vec<ScenePoint> {
        let mut out = Vec::new();
        let mut boxes = vec![self.room];
        boxes.extend(&self.obstacles);
        for b in &boxes {
            for axis in 0..3 {
                let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
                for side in [b.min[axis], b.max[axis]] {
                    let nu = ((b.max[u] - b.min[u]) / spacing).floor() as usize;
                    let nv = ((b.max[v] - b.min[v]) / spacing).floor() as usize;
                    for i in 0..=nu {
                        for j in 0..=nv {
                            let mut p = Vector3::zeros();
                            p[axis] = side;
                            p[u] = b.min[u] + i as f64 * spacing;
                            p[v] = b.min[v] + j as f64 * spacing;
                            let inside_obstacle = self
                                .obstacles
                                .iter()
                                .any(|o| o != b && o.contains(&p));
                            if self.room.contains(&p) && !inside_obstacle {
                                out.push(Point3::from(p));
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// The room volume, used as the outlier box for oracle predictions.
    pub fn bounds(&self) -> WorldBox {
        WorldBox {
            min: self.room.min.into(),
            max: self.room.max.into(),
        }
    }

    /// `n` camera-to-world poses inside the camera region with a random
    /// heading, a moderate pitch and a small roll.
    pub fn camera_poses(&self, n: usize, seed: u64) -> Vec<Pose> {
        (0..n)
            .map(|i| {
                let mut rng = rng::stream(seed, "camera", i as u64);
                let c = &self.camera_region;
                let center = Vector3::from_fn(|j, _| rng.random_range(c.min[j]..c.max[j]));
                let yaw = rng.random_range(0.0..std::f64::consts::TAU);
                let pitch: f64 = rng.random_range(-0.35..0.35);
                let roll = rng.random_range(-0.15..0.15);
                let forward = Vector3::new(yaw.sin() * pitch.cos(), pitch.sin(), yaw.cos() * pitch.cos());
                let look = look_rotation(&forward);
                let rot = look * UnitQuaternion::from_axis_angle(&Vector3::z_axis(), roll);
                Pose::new(rot, center)
            })
            .collect()
    }

    pub fn frames(&self, k: &Intrinsics, scene: &str, sequence: &str, n: usize, seed: u64) -> Vec<FrameRecord> {
        self.camera_poses(n, rng::stream_seed(seed, sequence, 0))
            .into_iter()
            .enumerate()
            .map(|(i, pose)| {
                let (rgb, depth) = self.render(k, &pose);
                FrameRecord {
                    id: FrameId::new(scene, sequence, i as u32),
                    rgb,
                    depth,
                    pose,
                    intrinsics: *k,
                }
            })
            .collect()
    }
}

/// Camera rotation whose +z axis points along `forward`, with +y roughly
/// along world +y (image rows grow downward, world y is "down").
fn look_rotation(forward: &Vector3<f64>) -> UnitQuaternion<f64> {
    let z = forward.normalize();
    let mut x = Vector3::y().cross(&z);
    if x.norm() < 1e-9 {
        x = Vector3::x();
    }
    let x = x.normalize();
    let y = z.cross(&x);
    let m = Rotation3::from_basis_unchecked(&[x, y, z]);
    UnitQuaternion::from_rotation_matrix(&m)
}

/// Writes a small 7-Scenes style dataset: `root/<scene>/seq-01` (train),
/// `seq-02` (test) and the two split files.
pub fn write_fixture(
    root: &Path,
    scene_name: &str,
    k: &Intrinsics,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<(), ImageIoError> {
    let scene = SyntheticScene::default();
    let scene_root = root.join(scene_name);
    fs::create_dir_all(&scene_root)?;
    for (seq, n) in [("seq-01", n_train), ("seq-02", n_test)] {
        for f in scene.frames(k, scene_name, seq, n, seed) {
            write_frame_files(&scene_root, &f.id, &f.rgb, &f.depth, &f.pose)?;
        }
    }
    write_split(&scene_root.join("TrainSplit.txt"), "sequence1")?;
    write_split(&scene_root.join("TestSplit.txt"), "sequence2")?;
    Ok(())
}

fn write_split(path: &Path, line: &str) -> io::Result<()> {
    fs::write(path, format!("{line}\n"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::reprojection_error;
    use crate::scene_map::scene_coords_from_depth;

    fn small_k() -> Intrinsics {
        Intrinsics::new(60.0, 60.0, 32.0, 24.0, 64, 48).unwrap()
    }

    #[test]
    fn enough_surface_points() {
        assert!(SyntheticScene::default().surface_points(100.0).len() >= 5000);
    }

    #[test]
    fn render_has_no_holes_and_matches_geometry() {
        let scene = SyntheticScene::default();
        let k = small_k();
        for pose in scene.camera_poses(5, 1) {
            let (_, depth) = scene.render(&k, &pose);
            let (coords, mask) = scene_coords_from_depth(&depth, &pose, &k).unwrap();
            assert_eq!(mask.count(), 64 * 48);
            for y in 0..48 {
                for x in 0..64 {
                    let p = coords.get(x, y);
                    let px = Point2::new(x as f64, y as f64);
                    assert!(reprojection_error(&k, &pose, &p, &px) < 1e-9);
                    // on a surface up to the 0.5 mm depth rounding
                    let hit = scene.raycast(&pose.translation, &(p.coords - pose.translation)).unwrap();
                    assert!((hit.point - p.coords).norm() < 1.0);
                }
            }
        }
    }

    #[test]
    fn poses_are_rigid_and_deterministic() {
        let scene = SyntheticScene::default();
        let a = scene.camera_poses(20, 7);
        assert_eq!(a, scene.camera_poses(20, 7));
        assert_ne!(a, scene.camera_poses(20, 8));
        for p in &a {
            assert!((p.rotation.norm() - 1.0).abs() < 1e-12);
            assert!(scene.camera_region.contains(&p.translation));
        }
    }

    #[test]
    fn look_rotation_points_forward() {
        let f = Vector3::new(0.3, -0.2, 0.9).normalize();
        let q = look_rotation(&f);
        assert!((q * Vector3::z() - f).norm() < 1e-12);
        assert!((q * Vector3::x()).y.abs() < 1e-12);
    }
}
