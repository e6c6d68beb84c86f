//! Four-point pose: P3P on the best-conditioned triple, the fourth point picks
//! among the candidates, then a short Gauss-Newton polish on all four.

use nalgebra::Vector3;

use crate::geometry::{reprojection_error_cam, Intrinsics, Pose};
use crate::predictor::Correspondence;

use super::p3p;
use super::refine::{gauss_newton, CamFromWorld};
use super::SolverError;

/// Triples whose normalized area `|AB x AC| / max_edge^2` falls below this are
/// treated as collinear.
pub const COLLINEAR_TOLERANCE: f64 = 1e-5;
/// Point sets whose extent is below this many mm are treated as coincident.
pub const COINCIDENT_TOLERANCE_MM: f64 = 1e-6;
pub const POLISH_STEPS: usize = 10;

const TRIPLES: [([usize; 3], usize); 4] = [([0, 1, 2], 3), ([0, 1, 3], 2), ([0, 2, 3], 1), ([1, 2, 3], 0)];

/// Camera-to-world pose from exactly four correspondences.
pub fn solve_pnp_minimal(corrs: &[Correspondence; 4], k: &Intrinsics) -> Result<Pose, SolverError> {
    solve_minimal_cam(corrs, k).map(CamFromWorld::to_pose)
}

pub(crate) fn solve_minimal_cam(corrs: &[Correspondence; 4], k: &Intrinsics) -> Result<CamFromWorld, SolverError> {
    let x: [Vector3<f64>; 4] = corrs.each_ref().map(|c| c.point.coords);

    let mut extent_sq: f64 = 0.0;
    for i in 0..4 {
        for j in i + 1..4 {
            extent_sq = extent_sq.max((x[i] - x[j]).norm_squared());
        }
    }
    if !extent_sq.is_finite() || extent_sq.sqrt() < COINCIDENT_TOLERANCE_MM {
        return Err(SolverError::Degenerate);
    }
    let mut triples: Vec<(f64, [usize; 3], usize)> = TRIPLES
        .iter()
        .map(|&(t, other)| {
            let area = (x[t[1]] - x[t[0]]).cross(&(x[t[2]] - x[t[0]])).norm() / extent_sq;
            (area, t, other)
        })
        .collect();
    triples.sort_by(|a, b| b.0.total_cmp(&a.0));
    if triples[0].0 < COLLINEAR_TOLERANCE {
        return Err(SolverError::Degenerate);
    }

    let bearings: [Vector3<f64>; 4] = corrs.each_ref().map(|c| k.ray(&c.pixel).normalize());
    for &(area, t, other) in &triples {
        if area < COLLINEAR_TOLERANCE {
            break;
        }
        let world = t.map(|i| x[i]);
        let rays = t.map(|i| bearings[i]);
        let best = p3p::solve(&world, &rays)
            .into_iter()
            .map(|(r, t)| CamFromWorld { r, t })
            .filter(|pose| x.iter().all(|p| pose.apply(p).z > 0.0))
            .map(|pose| {
                let p = pose.apply(&x[other]);
                let err = reprojection_error_cam(k, &p.into(), &corrs[other].pixel);
                (err, pose)
            })
            .min_by(|a, b| a.0.total_cmp(&b.0));
        if let Some((_, pose)) = best {
            return Ok(gauss_newton(k, pose, corrs, POLISH_STEPS));
        }
    }
    Err(SolverError::NoValidCandidate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{pose_error, reprojection_error};
    use nalgebra::{Point2, Point3, UnitQuaternion};

    fn corr(k: &Intrinsics, pose: &Pose, u: f64, v: f64, d: f64) -> Correspondence {
        let px = Point2::new(u, v);
        Correspondence {
            pixel: px,
            point: pose.transform_point(&k.backproject(&px, d).unwrap()),
        }
    }

    #[test]
    fn recovers_known_pose() {
        let k = Intrinsics::seven_scenes();
        let pose = Pose::new(
            UnitQuaternion::from_euler_angles(-0.3, 0.8, 0.1),
            Vector3::new(-400.0, 900.0, 150.0),
        );
        let corrs = [
            corr(&k, &pose, 100.0, 50.0, 1800.0),
            corr(&k, &pose, 500.0, 90.0, 2500.0),
            corr(&k, &pose, 320.0, 400.0, 1200.0),
            corr(&k, &pose, 600.0, 300.0, 3100.0),
        ];
        let est = solve_pnp_minimal(&corrs, &k).unwrap();
        for c in &corrs {
            assert!(reprojection_error(&k, &est, &c.point, &c.pixel) < 1e-6);
        }
        let e = pose_error(&est, &pose);
        assert!(e.translational < 1e-6 && e.rotational < 1e-6, "{e:?}");
    }

    #[test]
    fn identity_fixed_point() {
        let k = Intrinsics::seven_scenes();
        let id = Pose::identity();
        let corrs = [
            corr(&k, &id, 320.0, 240.0, 2000.0),
            corr(&k, &id, 420.0, 240.0, 1500.0),
            corr(&k, &id, 320.0, 140.0, 2500.0),
            corr(&k, &id, 220.0, 340.0, 1800.0),
        ];
        let est = solve_pnp_minimal(&corrs, &k).unwrap();
        assert!(est.rotation.angle() < 1e-6 && est.translation.norm() < 1e-6, "{est:?}");
    }

    #[test]
    fn collinear_points_are_degenerate() {
        let k = Intrinsics::seven_scenes();
        let corrs: [Correspondence; 4] = [0.0, 1.0, 2.0, 3.0].map(|s| Correspondence {
            pixel: Point2::new(300.0 + s, 200.0),
            point: Point3::new(100.0 * s, 50.0 * s, 2000.0 + 10.0 * s),
        });
        assert!(matches!(solve_pnp_minimal(&corrs, &k), Err(SolverError::Degenerate)));
    }

    #[test]
    fn coincident_points_are_degenerate() {
        let k = Intrinsics::seven_scenes();
        let corrs: [Correspondence; 4] = [0.0, 1.0, 2.0, 3.0].map(|s| Correspondence {
            pixel: Point2::new(300.0 + 10.0 * s, 200.0 - s),
            point: Point3::new(5.0, 5.0, 2000.0),
        });
        assert!(matches!(solve_pnp_minimal(&corrs, &k), Err(SolverError::Degenerate)));
    }
}
