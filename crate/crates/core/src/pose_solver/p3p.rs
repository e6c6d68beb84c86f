//! Three-point absolute pose (Lambda Twist formulation), double precision.
//!
//! Solves `lambda_i * f_i = R * x_i + t` for the world-to-camera rotation and
//! translation given three world points `x_i` and unit bearings `f_i`.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};

/// Real roots of `r^2 + b r + c`, or `None` when complex.
fn quadratic_roots(b: f64, c: f64) -> Option<(f64, f64)> {
    let disc = b * b - 4.0 * c;
    if disc < 0.0 {
        return None;
    }
    let y = disc.sqrt();
    // avoid cancellation
    if b < 0.0 {
        Some((0.5 * (-b + y), 2.0 * c / (-b + y)))
    } else if b > 0.0 {
        Some((2.0 * c / (-b - y), 0.5 * (-b - y)))
    } else {
        Some((0.5 * y, -0.5 * y))
    }
}

/// One real root of `r^3 + b r^2 + c r + d`, chosen where the cubic is steep.
fn cubic_root(b: f64, c: f64, d: f64) -> f64 {
    let h = |r: f64| ((r + b) * r + c) * r + d;
    let dh = |r: f64| (3.0 * r + 2.0 * b) * r + c;

    let mut r0;
    if b * b >= 3.0 * c {
        // two stationary points t1 < t2
        let v = (b * b - 3.0 * c).sqrt();
        let t1 = (-b - v) / 3.0;
        let k = h(t1);
        if k > 0.0 {
            r0 = t1 - (-k / (3.0 * t1 + b)).abs().sqrt();
        } else {
            let t2 = (-b + v) / 3.0;
            let k = h(t2);
            r0 = t2 + (-k / (3.0 * t2 + b)).abs().sqrt();
        }
    } else {
        r0 = -b / 3.0;
        if dh(r0).abs() < 1e-4 {
            r0 += 1.0;
        }
    }

    for i in 0..50 {
        let fx = h(r0);
        if i >= 7 && fx.abs() < 1e-14 {
            break;
        }
        let dfx = dh(r0);
        if dfx == 0.0 {
            break;
        }
        r0 -= fx / dfx;
    }
    r0
}

/// Newton refinement of the three depths on the distance constraints.
#[allow(clippy::too_many_arguments)]
fn refine_depths(
    lambda: Vector3<f64>,
    a12: f64,
    a13: f64,
    a23: f64,
    b12: f64,
    b13: f64,
    b23: f64,
) -> Vector3<f64> {
    let residual = |l: &Vector3<f64>| {
        Vector3::new(
            l.x * l.x + l.y * l.y + b12 * l.x * l.y - a12,
            l.x * l.x + l.z * l.z + b13 * l.x * l.z - a13,
            l.y * l.y + l.z * l.z + b23 * l.y * l.z - a23,
        )
    };
    let mut l = lambda;
    let mut r = residual(&l);
    for _ in 0..5 {
        if r.abs().sum() < 1e-13 * (a12 + a13 + a23) {
            break;
        }
        let j = Matrix3::new(
            2.0 * l.x + b12 * l.y,
            2.0 * l.y + b12 * l.x,
            0.0,
            2.0 * l.x + b13 * l.z,
            0.0,
            2.0 * l.z + b13 * l.x,
            0.0,
            2.0 * l.y + b23 * l.z,
            2.0 * l.z + b23 * l.y,
        );
        let Some(step) = j.lu().solve(&r) else {
            break;
        };
        let next = l - step;
        let rn = residual(&next);
        if rn.abs().sum() >= r.abs().sum() {
            break;
        }
        l = next;
        r = rn;
    }
    l
}

fn newton_cubic(mut r: f64, b: f64, c: f64, d: f64) -> f64 {
    for _ in 0..5 {
        let fx = ((r + b) * r + c) * r + d;
        let dfx = (3.0 * r + 2.0 * b) * r + c;
        if dfx == 0.0 || fx == 0.0 {
            break;
        }
        r -= fx / dfx;
    }
    r
}

/// Splits the degenerate conic `d0` into its two lines and intersects each
/// with the first distance constraint. Returns `false` when the lines are
/// complex, so the caller can try another root.
#[allow(clippy::too_many_arguments)]
fn depths_from_pencil(
    d0: &Matrix3<f64>,
    a12: f64,
    a13: f64,
    b12: f64,
    b13: f64,
    b23: f64,
    a23: f64,
    out: &mut Vec<Vector3<f64>>,
) -> bool {
    let eig = SymmetricEigen::new(*d0);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| eig.eigenvalues[j].abs().total_cmp(&eig.eigenvalues[i].abs()));
    let (e1, e2) = (eig.eigenvalues[order[0]], eig.eigenvalues[order[1]]);
    if e1 == 0.0 || e1 * e2 > 0.0 {
        return false;
    }
    let v1 = eig.eigenvectors.column(order[0]).into_owned();
    let v2 = eig.eigenvectors.column(order[1]).into_owned();
    let ratio = (-e2 / e1).sqrt();

    let before = out.len();
    for s in [ratio, -ratio] {
        let denom = s * v2[0] - v1[0];
        if denom == 0.0 {
            continue;
        }
        let w2 = 1.0 / denom;
        let w0 = w2 * (v1[1] - s * v2[1]);
        let w1 = w2 * (v1[2] - s * v2[2]);
        let a_den = (a13 - a12) * w1 * w1 - a12 * b13 * w1 - a12;
        if a_den == 0.0 {
            continue;
        }
        let a = 1.0 / a_den;
        let b = a * (a13 * b12 * w1 - a12 * b13 * w0 - 2.0 * w0 * w1 * (a12 - a13));
        let c = a * ((a13 - a12) * w0 * w0 + a13 * b12 * w0 + a13);
        let Some((tau1, tau2)) = quadratic_roots(b, c) else {
            continue;
        };
        for tau in [tau1, tau2] {
            if tau <= 0.0 {
                continue;
            }
            let d = a23 / (tau * (b23 + tau) + 1.0);
            if d <= 0.0 {
                continue;
            }
            let l2 = d.sqrt();
            let l3 = tau * l2;
            let l1 = w0 * l2 + w1 * l3;
            if l1 >= 0.0 {
                out.push(Vector3::new(l1, l2, l3));
            }
        }
    }
    out.len() > before
}

/// Up to four world-to-camera solutions `(R, t)`.
pub(crate) fn solve(world: &[Vector3<f64>; 3], bearings: &[Vector3<f64>; 3]) -> Vec<(Matrix3<f64>, Vector3<f64>)> {
    let [x1, x2, x3] = *world;
    let f1 = bearings[0].normalize();
    let f2 = bearings[1].normalize();
    let f3 = bearings[2].normalize();

    let d12 = x1 - x2;
    let d13 = x1 - x3;
    let d23 = x2 - x3;
    let a12 = d12.norm_squared();
    let a13 = d13.norm_squared();
    let a23 = d23.norm_squared();

    let c12 = f1.dot(&f2);
    let c23 = f2.dot(&f3);
    let c31 = f3.dot(&f1);
    let b12 = -2.0 * c12;
    let b13 = -2.0 * c31;
    let b23 = -2.0 * c23;

    // D0(g) = D1 - g D2 is a degenerate conic for every root of det(D0) = 0
    let d1 = Matrix3::new(
        a23,
        -a23 * c12,
        0.0,
        -a23 * c12,
        a23 - a12,
        a12 * c23,
        0.0,
        a12 * c23,
        -a12,
    );
    let d2 = Matrix3::new(
        a23,
        0.0,
        -a23 * c31,
        0.0,
        -a13,
        a13 * c23,
        -a23 * c31,
        a13 * c23,
        a23 - a13,
    );
    // det(D1 - g D2) = p3 g^3 + p2 g^2 + p1 g + p0, read off four evaluations
    let p0 = d1.determinant();
    let p3 = -d2.determinant();
    let fp = (d1 - d2).determinant();
    let fm = (d1 + d2).determinant();
    let p2 = 0.5 * (fp + fm) - p0;
    let p1 = 0.5 * (fp - fm) - p3;
    if p3.abs() < f64::EPSILON * (p2.abs() + p1.abs() + p0.abs()) || !p3.is_finite() {
        return Vec::new();
    }
    let (b, c, d) = (p2 / p3, p1 / p3, p0 / p3);
    let g0 = cubic_root(b, c, d);
    if !g0.is_finite() {
        return Vec::new();
    }
    let mut roots = vec![g0];
    // deflate: g^2 + (b + g0) g + (c + g0 (b + g0))
    if let Some((r1, r2)) = quadratic_roots(b + g0, c + g0 * (b + g0)) {
        roots.extend([r1, r2].map(|r| newton_cubic(r, b, c, d)));
    }

    let mut depths: Vec<Vector3<f64>> = Vec::with_capacity(4);
    for g in roots {
        if depths_from_pencil(&(d1 - d2 * g), a12, a13, b12, b13, b23, a23, &mut depths) {
            break;
        }
    }

    let d12xd13 = d12.cross(&d13);
    let x_mat = Matrix3::from_columns(&[d12, d13, d12xd13]);
    let Some(x_inv) = x_mat.try_inverse() else {
        return Vec::new();
    };

    depths
        .into_iter()
        .filter_map(|l| {
            let l = refine_depths(l, a12, a13, a23, b12, b13, b23);
            let y1 = l.x * f1;
            let y2 = l.y * f2;
            let y3 = l.z * f3;
            let yd1 = y1 - y2;
            let yd2 = y1 - y3;
            let y_mat = Matrix3::from_columns(&[yd1, yd2, yd1.cross(&yd2)]);
            let r = nearest_rotation(&(y_mat * x_inv))?;
            let t = y1 - r * x1;
            (r.iter().all(|v| v.is_finite()) && t.iter().all(|v| v.is_finite())).then_some((r, t))
        })
        .collect()
}

/// Projection onto SO(3); `None` for reflections.
pub(crate) fn nearest_rotation(m: &Matrix3<f64>) -> Option<Matrix3<f64>> {
    let svd = m.svd(true, true);
    let r = svd.u? * svd.v_t?;
    (r.determinant() > 0.0).then_some(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::UnitQuaternion;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_and_cubic_roots() {
        let (a, b) = quadratic_roots(-3.0, 2.0).unwrap();
        assert!((a - 2.0).abs() < 1e-12 && (b - 1.0).abs() < 1e-12);
        assert!(quadratic_roots(0.0, 1.0).is_none());
        // (r - 1)(r - 2)(r + 3) = r^3 - 7r + 6
        let r = cubic_root(0.0, -7.0, 6.0);
        assert!(((r - 1.0) * (r - 2.0) * (r + 3.0)).abs() < 1e-10);
    }

    #[test]
    fn recovers_random_poses() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..500 {
            let rot = UnitQuaternion::from_scaled_axis(Vector3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            ));
            let r = *rot.to_rotation_matrix().matrix();
            let t = Vector3::new(
                rng.random_range(-1000.0..1000.0),
                rng.random_range(-1000.0..1000.0),
                rng.random_range(-1000.0..1000.0),
            );
            let cams: Vec<Vector3<f64>> = (0..3)
                .map(|_| {
                    Vector3::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-0.8..0.8),
                        1.0,
                    ) * rng.random_range(500.0..5000.0)
                })
                .collect();
            let world = [0, 1, 2].map(|i| r.transpose() * (cams[i] - t));
            let bearings = [0, 1, 2].map(|i| cams[i].normalize());
            let sols = solve(&world, &bearings);
            let best = sols
                .iter()
                .map(|(rs, ts)| (rs - r).norm() + (ts - t).norm() * 1e-3)
                .fold(f64::INFINITY, f64::min);
            assert!(best < 1e-6, "best {best} of {} solutions", sols.len());
        }
    }
}
